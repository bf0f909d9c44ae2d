#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "legs/trainer.hpp"

namespace legs {
namespace {

PinholeCamera small_camera(Se3Pose pose = {}) {
  PinholeCamera c;
  c.width = 48;
  c.height = 32;
  c.fx = c.fy = 40.0;
  c.cx = 23.5;
  c.cy = 15.5;
  c.pose = pose;
  return c;
}

/// A fronto-parallel wall at `depth` with a smooth colour pattern.
Keyframe wall_keyframe(std::uint64_t seq, double depth, Se3Pose pose = {}) {
  Keyframe kf;
  kf.seq = seq;
  kf.camera_id = "cam0";
  kf.camera = small_camera(pose);
  kf.image = Image(48, 32, 3);
  kf.depth = Image(48, 32, 1, static_cast<float>(depth));
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 48; ++x) {
      float* p = kf.image.pixel(x, y);
      p[0] = 0.5f + 0.4f * std::sin(0.3f * x);
      p[1] = 0.5f + 0.4f * std::cos(0.25f * y);
      p[2] = 0.3f;
    }
  return kf;
}

TrainConfig small_config(bool language = false) {
  TrainConfig c;
  c.language = language;
  c.init_samples = 300;
  c.seed = 7;
  return c;
}

LangFieldConfig small_field() {
  LangFieldConfig f;
  f.grid.levels = 3;
  f.grid.table_size = 1u << 10;
  f.grid.features_per_level = 2;
  f.grid.base_resolution = 4;
  f.grid.max_resolution = 16;
  f.grid.aabb_min = Eigen::Vector3d(-3, -3, 0);
  f.grid.aabb_max = Eigen::Vector3d(3, 3, 4);
  f.hidden_layers = 1;
  f.hidden_width = 16;
  f.output_dim = 4;
  return f;
}

/// Writes a constant-target pyramid (two levels) for a keyframe.
std::string write_targets(const std::filesystem::path& dir, std::uint64_t seq, std::vector<float> e) {
  EmbeddingFile f;
  f.dim = static_cast<int>(e.size());
  for (float s : {0.1f, 1.0f}) {
    EmbeddingRecord r;
    r.kind = EmbeddingKind::grid;
    r.scale = s;
    r.rows = 8;
    r.cols = 12;
    for (std::size_t p = 0; p < r.count(); ++p) r.data.insert(r.data.end(), e.begin(), e.end());
    f.records.push_back(r);
  }
  const std::string name = "emb_" + std::to_string(seq) + ".legsemb";
  write_embeddings((dir / name).string(), f);
  return name;
}

TEST(Trainer, IngestSamplesRequestedCountOnTheWallPlane) {
  Trainer t(small_config(), small_field());
  t.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  const auto& g = t.state().gaussians;
  ASSERT_EQ(g.size(), 300u);
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_NEAR(g.mean(i).z(), 2.0f, 1e-6f);
    EXPECT_NEAR(sigmoid(g.opacity_logits[i]), 0.1, 1e-6);
    EXPECT_EQ(g.anchors[i], 0u);
  }
  EXPECT_GT(t.state().scene_extent, 0.5);
}

TEST(Trainer, IngestSamplesWithoutReplacement) {
  TrainConfig c = small_config();
  c.init_samples = 48 * 32;
  Trainer t(c, small_field());
  t.ingest_keyframe(wall_keyframe(0, 1.0), ".");
  const auto& g = t.state().gaussians;
  ASSERT_EQ(g.size(), 48u * 32u);
  std::set<std::pair<long, long>> seen;
  for (std::size_t i = 0; i < g.size(); ++i)
    seen.insert({std::lround(g.mean(i).x() * 1e4), std::lround(g.mean(i).y() * 1e4)});
  EXPECT_EQ(seen.size(), g.size());
}

TEST(Trainer, EmptyDepthWarnsAndAddsNothing) {
  std::vector<std::string> warnings;
  Trainer t(small_config(), small_field(), [&](const std::string& w) { warnings.push_back(w); });
  Keyframe kf = wall_keyframe(0, 0.0);
  t.ingest_keyframe(kf, ".");
  EXPECT_EQ(t.gaussian_count(), 0u);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("seq 0"), std::string::npos);
}

TEST(Trainer, InitialScaleIsMeanDistanceToThreeNearestInWholeCloud) {
  Trainer t(small_config(), small_field());
  t.ingest_keyframe(wall_keyframe(0, 2.0), {});
  Se3Pose shifted;
  shifted.translation = Eigen::Vector3d(0.03, -0.02, 0.5);
  t.ingest_keyframe(wall_keyframe(1, 1.7, shifted), {});
  const auto& g = t.state().gaussians;
  ASSERT_EQ(g.size(), 600u);
  // Brute force: the second batch sees itself and the whole first batch.
  for (std::size_t i = 300; i < 600; i += 7) {
    std::vector<double> d;
    for (std::size_t j = 0; j < 600; ++j)
      if (j != i) d.push_back((g.mean(i) - g.mean(j)).cast<double>().norm());
    std::partial_sort(d.begin(), d.begin() + 3, d.end());
    const double expected = std::max((d[0] + d[1] + d[2]) / 3, 1e-4);
    EXPECT_NEAR(std::exp(g.log_scale(i).x()), expected, 1e-5 * expected) << i;
  }
}

TEST(Trainer, RejectsNonIncreasingKeyframes) {
  Trainer t(small_config(), small_field());
  t.ingest_keyframe(wall_keyframe(3, 2.0), ".");
  EXPECT_THROW(t.ingest_keyframe(wall_keyframe(3, 2.0), "."), DataError);
}

TEST(Trainer, PhotometricLossDecreases) {
  Trainer t(small_config(), small_field());
  t.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  const double first = t.train_step().rgb;
  double last = first;
  for (int i = 0; i < 199; ++i) last = t.train_step().rgb;
  EXPECT_LT(last, 0.7 * first);
  EXPECT_NO_THROW(t.check_finite());
}

TEST(Trainer, LanguageTermNeverChangesGeometry) {
  const auto dir = std::filesystem::temp_directory_path() / "legs_trainer_lang";
  std::filesystem::create_directories(dir);
  Keyframe kf = wall_keyframe(0, 2.0);
  kf.embeddings_file = write_targets(dir, 0, {0.6f, 0.8f, 0.0f, 0.0f});

  Trainer plain(small_config(false), small_field());
  Trainer lang(small_config(true), small_field());
  plain.ingest_keyframe(kf, dir);
  lang.ingest_keyframe(kf, dir);
  for (int i = 0; i < 30; ++i) {
    plain.train_step();
    const auto l = lang.train_step();
    ASSERT_TRUE(l.lang.has_value());
  }
  const auto& a = plain.state().gaussians;
  const auto& b = lang.state().gaussians;
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a.means, b.means);
  EXPECT_EQ(a.log_scales, b.log_scales);
  EXPECT_EQ(a.opacity_logits, b.opacity_logits);
  EXPECT_EQ(a.colors, b.colors);
}

TEST(Trainer, ZeroLanguageWeightMatchesNoField) {
  TrainConfig c = small_config(true);
  c.lambda_lang = 0.0;
  Trainer with_field(c, small_field());
  Trainer without(small_config(false), small_field());
  with_field.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  without.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  for (int i = 0; i < 10; ++i) {
    const auto a = with_field.train_step();
    const auto b = without.train_step();
    EXPECT_EQ(a.total, b.total);
    EXPECT_FALSE(a.lang.has_value());
  }
  EXPECT_EQ(with_field.state().gaussians.means, without.state().gaussians.means);
}

TEST(Trainer, LanguageLossDecreasesTowardConstantTarget) {
  const auto dir = std::filesystem::temp_directory_path() / "legs_trainer_lang2";
  std::filesystem::create_directories(dir);
  Keyframe kf = wall_keyframe(0, 2.0);
  kf.embeddings_file = write_targets(dir, 0, {0.0f, 0.0f, 1.0f, 0.0f});
  TrainConfig c = small_config(true);
  c.lambda_lang = 1.0;
  Trainer t(c, small_field());
  t.ingest_keyframe(kf, dir);
  const double first = *t.train_step().lang;
  double last = first;
  for (int i = 0; i < 150; ++i) last = *t.train_step().lang;
  EXPECT_LT(last, 0.2 * first);
  EXPECT_LT(last, 0.05);
}

TEST(Trainer, DensifyIsNoOpWithoutGradientsAndPrunesTransparent) {
  Trainer t(small_config(), small_field());
  t.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  const auto before = t.state().gaussians;
  const DensifyStats none = t.densify_and_prune();
  EXPECT_FALSE(none.changed());
  EXPECT_EQ(t.state().gaussians.means, before.means);

  t.state().gaussians.opacity_logits[5] = static_cast<float>(logit(0.001));
  t.state().gaussians.opacity_logits[9] = static_cast<float>(logit(0.001));
  const DensifyStats s = t.densify_and_prune();
  EXPECT_EQ(s.pruned, 2u);
  EXPECT_EQ(t.gaussian_count(), before.size() - 2);
  EXPECT_EQ(t.state().gaussians.mean(5), before.mean(6));
}

TEST(Trainer, DensifyClonesSmallAndSplitsLarge) {
  TrainConfig c = small_config();
  c.init_samples = 4;
  Trainer t(c, small_field());
  t.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  auto& st = t.state();
  st.scene_extent = 10.0;  // split limit 0.1
  st.gaussians.log_scale(0) = Vec3<float>::Constant(std::log(0.01f));
  st.gaussians.log_scale(1) = Vec3<float>::Constant(std::log(0.5f));
  st.grad_accum = {1.0f, 1.0f, 0.0f, 0.0f};
  st.grad_count = {1.0f, 1.0f, 1.0f, 1.0f};
  const auto g1 = st.gaussians.get(1);
  const DensifyStats s = t.densify_and_prune();
  EXPECT_EQ(s.cloned, 1u);
  EXPECT_EQ(s.split, 1u);
  // Kept: 0, 2, 3; then clone of 0 and two children of 1.
  ASSERT_EQ(t.gaussian_count(), 6u);
  for (std::size_t i : {4u, 5u})
    EXPECT_NEAR(t.state().gaussians.log_scale(i).x(), std::log(0.5f / 1.6f), 1e-6);
  (void)g1;
}

TEST(Trainer, CapDropsLowestOpacityFirst) {
  TrainConfig c = small_config();
  c.init_samples = 5;
  c.max_gaussians = 3;
  Trainer t(c, small_field());
  t.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  auto& g = t.state().gaussians;
  const float ops[] = {0.9f, 0.2f, 0.5f, 0.2f, 0.7f};
  for (int i = 0; i < 5; ++i) g.opacity_logits[i] = static_cast<float>(logit(ops[i]));
  const Vec3<float> m0 = g.mean(0), m2 = g.mean(2), m4 = g.mean(4);
  const DensifyStats s = t.densify_and_prune();
  EXPECT_EQ(s.capped, 2u);
  ASSERT_EQ(t.gaussian_count(), 3u);
  EXPECT_EQ(t.state().gaussians.mean(0), m0);
  EXPECT_EQ(t.state().gaussians.mean(1), m2);
  EXPECT_EQ(t.state().gaussians.mean(2), m4);
}

TEST(Trainer, IdentityPoseUpdateChangesNothing) {
  Trainer t(small_config(), small_field());
  t.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  const auto before = t.state().gaussians;
  PoseUpdateEvent ev{0, {{0, small_camera().pose}}};
  t.apply_pose_update(ev, true);
  EXPECT_EQ(t.state().gaussians.means, before.means);
  EXPECT_EQ(t.state().gaussians.rotations, before.rotations);
}

TEST(Trainer, RebaseMovesAnchoredGaussiansRigidly) {
  Trainer t(small_config(), small_field());
  t.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  t.ingest_keyframe(wall_keyframe(1, 2.0, Se3Pose({0.0, 0.0, 1.0}, Eigen::Quaterniond::Identity())), ".",
                    true);
  const auto before = t.state().gaussians;
  const Se3Pose new_pose(Eigen::Vector3d(0.1, -0.2, 0.05),
                         Eigen::Quaterniond(Eigen::AngleAxisd(0.1, Eigen::Vector3d(0, 1, 1).normalized())));
  t.apply_pose_update({1, {{0, new_pose}}}, true);
  const Se3Pose delta = se3_compose(new_pose, se3_inverse(Se3Pose{}));
  const auto& g = t.state().gaussians;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (before.anchors[i] == 0) {
      const Eigen::Vector3d expect = se3_apply(delta, before.mean(i).cast<double>());
      EXPECT_LT((g.mean(i).cast<double>() - expect).norm(), 1e-5);
    } else {
      EXPECT_EQ(g.mean(i), before.mean(i));
    }
  }
  EXPECT_EQ(t.state().views[0].camera.pose, new_pose);
}

TEST(Trainer, PoseUpdateWithUnknownSeqIsRejectedAtomically) {
  Trainer t(small_config(), small_field());
  t.ingest_keyframe(wall_keyframe(0, 2.0), ".");
  const Se3Pose moved(Eigen::Vector3d(1, 0, 0), Eigen::Quaterniond::Identity());
  EXPECT_THROW(t.apply_pose_update({0, {{0, moved}, {42, moved}}}, true), DataError);
  EXPECT_EQ(t.state().views[0].camera.pose, Se3Pose{});
}

TEST(Trainer, SameSeedIsBitIdentical) {
  auto run = [] {
    Trainer t(small_config(), small_field());
    t.ingest_keyframe(wall_keyframe(0, 2.0), ".");
    t.ingest_keyframe(wall_keyframe(1, 2.2), ".");
    for (int i = 0; i < 20; ++i) t.train_step();
    return t.state().gaussians.means;
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace legs
