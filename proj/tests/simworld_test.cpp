#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "legs/simworld.hpp"

namespace legs::sim {
namespace {

SceneSpec two_object_scene() {
  SceneSpec s;
  s.seed = 3;
  s.embedding_dim = 8;
  SceneObject box;
  box.name = "crate";
  box.center = Eigen::Vector3d(0.3, 0.2, 0.25);
  box.size = Eigen::Vector3d(0.5, 0.3, 0.5);
  box.yaw = 0.4;
  box.color = Eigen::Vector3d(0.8, 0.2, 0.2);
  SceneObject ball;
  ball.name = "ball";
  ball.primitive = Primitive::sphere;
  ball.center = Eigen::Vector3d(-0.4, -0.3, 0.2);
  ball.size = Eigen::Vector3d::Constant(0.4);
  ball.color = Eigen::Vector3d(0.2, 0.3, 0.9);
  s.objects = {box, ball};
  return s;
}

PinholeCamera tiny_intrinsics() {
  PinholeCamera c;
  c.width = 32;
  c.height = 24;
  c.fx = c.fy = 30.0;
  c.cx = 15.5;
  c.cy = 11.5;
  return c;
}

RigConfig two_camera_rig() {
  RigConfig rig;
  rig.primary = "front";
  rig.cameras.push_back({"front", tiny_intrinsics(), Se3Pose{}});
  rig.cameras.push_back({"left", tiny_intrinsics(),
                         Se3Pose(Eigen::Vector3d(0.05, 0, 0),
                                 Eigen::Quaterniond(Eigen::AngleAxisd(-0.7, Eigen::Vector3d::UnitY())))});
  return rig;
}

TrajectorySpec tiny_trajectory() {
  TrajectorySpec t;
  t.steps = 4;
  t.heldout_views = 1;
  t.embeddings = false;
  t.seed = 11;
  return t;
}

Json read_json(const fs::path& p) {
  std::ifstream is(p);
  return Json::parse(is);
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

TEST(Simworld, PlantedEmbeddingsAreOrthonormal) {
  const auto p = plant_embeddings(two_object_scene());
  std::vector<Eigen::VectorXd> all = p.objects;
  all.push_back(p.background);
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = 0; j < all.size(); ++j)
      EXPECT_NEAR(all[i].dot(all[j]), i == j ? 1.0 : 0.0, 1e-12);
  ASSERT_EQ(p.negatives.size(), 4u);
  for (const auto& n : p.negatives) EXPECT_NEAR(n.norm(), 1.0, 1e-12);
}

TEST(Simworld, RejectsObjectsOutsideTheRoom) {
  SceneSpec s = two_object_scene();
  s.objects[0].center.z() = 2.4;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Simworld, DepthSatisfiesSignedDistance) {
  const Raytracer rt(two_object_scene());
  PinholeCamera cam = tiny_intrinsics();
  cam.width = 64;
  cam.height = 48;
  cam.cx = 31.5;
  cam.cy = 23.5;
  cam.pose = look_at({1.2, -1.0, 1.2}, {0.0, 0.0, 0.3});
  const auto frame = rt.render(cam);
  int objects_seen = 0;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
      ASSERT_GE(frame.instance[p], 0);
      const auto w = deproject_pixel(x, y, frame.depth.data[p], cam);
      ASSERT_TRUE(w.has_value());
      EXPECT_LT(std::abs(rt.surface_distance(frame.instance[p], *w)), 1e-6);
      objects_seen += frame.instance[p] > 0;
    }
  EXPECT_GT(objects_seen, 50);
}

TEST(Simworld, TracedPointsLieOnSurfacesInDoublePrecision) {
  const Raytracer rt(two_object_scene());
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const Eigen::Vector3d o(0.2 * n(rng) + 1.0, 0.2 * n(rng) - 1.0, 1.3);
    const Eigen::Vector3d d(n(rng), n(rng), n(rng));
    const Hit h = rt.trace(o, d);
    ASSERT_GE(h.instance, 0);
    EXPECT_LT(std::abs(rt.surface_distance(h.instance, h.point)), 1e-9);
  }
}

TEST(Simworld, ZeroDriftManifestMatchesTruth) {
  const auto dir = fresh_dir("legs_sim_zero");
  const auto rig = two_camera_rig();
  const auto traj = tiny_trajectory();
  const auto stats = generate_stream(two_object_scene(), traj, rig, dir);
  EXPECT_EQ(stats.keyframes, 8u);
  EXPECT_EQ(stats.events, 0u);
  const auto records = read_manifest(dir / kManifestName);
  const Json gt = read_json(dir / "gt.json");
  ASSERT_EQ(records.size(), 8u);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& kf = std::get<Keyframe>(records[i]);
    EXPECT_EQ(kf.camera.pose, pose_from_json(gt["true_poses"][i]["pose"], "gt"));
    EXPECT_TRUE(fs::exists(dir / kf.image_file));
    EXPECT_TRUE(fs::exists(dir / kf.depth_file));
  }
  EXPECT_TRUE(fs::exists(dir / "queries.legsemb"));
  EXPECT_TRUE(fs::exists(dir / "annotations.json"));
  EXPECT_EQ(read_json(dir / "annotations.json").size(), 2u);
}

TEST(Simworld, BaEventsRestoreTruthForAllPriorKeyframes) {
  const auto dir = fresh_dir("legs_sim_ba");
  auto traj = tiny_trajectory();
  traj.sigma_t = 0.01;
  traj.sigma_r = 0.01;
  traj.ba_every = 2;
  const auto stats = generate_stream(two_object_scene(), traj, two_camera_rig(), dir);
  EXPECT_EQ(stats.events, 2u);
  const auto records = read_manifest(dir / kManifestName);
  const Json gt = read_json(dir / "gt.json");
  std::size_t kf_seen = 0, drifted = 0;
  for (const auto& r : records) {
    if (const auto* kf = std::get_if<Keyframe>(&r)) {
      const Se3Pose truth = pose_from_json(gt["true_poses"][kf->seq]["pose"], "gt");
      drifted += translation_distance(kf->camera.pose, truth) > 1e-4;
      ++kf_seen;
      continue;
    }
    const auto& ev = std::get<PoseUpdateEvent>(r);
    EXPECT_EQ(ev.corrections.size(), kf_seen);
    EXPECT_EQ(ev.trigger_seq + 1, kf_seen);
    for (const auto& c : ev.corrections) EXPECT_EQ(c.pose, pose_from_json(gt["true_poses"][c.seq]["pose"], "gt"));
  }
  EXPECT_EQ(drifted, 8u);
}

TEST(Simworld, DriftGrowsLikeSquareRootOfSteps) {
  // Per-axis random walk: E|dt_k|^2 = 3 sigma^2 (k + 1) before any BA.
  const double sigma = 0.002;
  for (int k : {8, 63}) {
    double acc = 0;
    const int seeds = 40;
    for (int s = 0; s < seeds; ++s) {
      TrajectorySpec t;
      t.steps = 64;
      t.sigma_t = sigma;
      t.sigma_r = 0.001;
      t.seed = static_cast<std::uint64_t>(s);
      acc += drift_sequence(t)[k].translation.squaredNorm();
    }
    const double ratio = acc / seeds / (3 * sigma * sigma * (k + 1));
    EXPECT_GT(ratio, 0.6) << "k=" << k;
    EXPECT_LT(ratio, 1.5) << "k=" << k;
  }
}

TEST(Simworld, DriftResetsAfterBa) {
  TrajectorySpec t;
  t.steps = 10;
  t.sigma_t = 0.01;
  t.ba_every = 4;
  const auto d = drift_sequence(t);
  TrajectorySpec no_ba = t;
  no_ba.ba_every = 0;
  const auto free = drift_sequence(no_ba);
  EXPECT_EQ(d[3].translation, free[3].translation);
  // Step 4 starts a fresh walk: only that step's increment remains.
  EXPECT_LT((d[4].translation - (free[4].translation - free[3].translation)).norm(), 1e-15);
}

/// Synthetic frame with a constant depth and an instance layout from `label`.
Raytracer::Frame synthetic_frame(int w, int h, double depth, const std::function<int(int, int)>& label) {
  Raytracer::Frame f;
  f.color = Image(w, h, 3);
  f.depth = Image(w, h, 1, static_cast<float>(depth));
  f.instance.resize(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) f.instance[static_cast<std::size_t>(y) * w + x] = label(x, y);
  return f;
}

PinholeCamera synthetic_camera(int w, int h, double fx) {
  PinholeCamera c;
  c.width = w;
  c.height = h;
  c.fx = c.fy = fx;
  c.cx = 0.5 * (w - 1);
  c.cy = 0.5 * (h - 1);
  return c;
}

Eigen::VectorXd cell(const EmbeddingRecord& r, int row, int col, int dim) {
  Eigen::VectorXd v(dim);
  for (int k = 0; k < dim; ++k) v[k] = r.at(row, col, dim)[k];
  return v;
}

TEST(Simworld, PureCropIsThePlantedEmbedding) {
  const auto planted = plant_embeddings(two_object_scene());
  const auto frame = synthetic_frame(40, 20, 1.0, [](int x, int) { return x < 30 ? 1 : 0; });
  const auto cam = synthetic_camera(40, 20, 10.0);
  const auto rec = embedding_targets(frame, cam, planted, 0.2, 20, 40);
  EXPECT_LT((cell(rec, 10, 10, planted.dim) - planted.objects[0]).norm(), 1e-6);
  EXPECT_LT((cell(rec, 10, 36, planted.dim) - planted.background).norm(), 1e-6);
}

TEST(Simworld, HalfHalfCropIsTheNormalizedMixture) {
  const auto planted = plant_embeddings(two_object_scene());
  // Cell c of a half-resolution grid centres on u = 2c + 0.5; a crop of
  // half-width 1.5 px covers pixels 2c-1 .. 2c+2.
  const int c = 5;
  const auto frame = synthetic_frame(20, 10, 1.0, [](int x, int) { return x <= 2 * c ? 2 : 0; });
  const auto cam = synthetic_camera(20, 10, 10.0);
  const auto rec = embedding_targets(frame, cam, planted, 0.3, 10, 10);
  const Eigen::VectorXd expect = (0.5 * planted.objects[1] + 0.5 * planted.background).normalized();
  EXPECT_LT((cell(rec, 5, c, planted.dim) - expect).norm(), 1e-6);
}

TEST(Simworld, TargetSimilarityFallsAsCropOutgrowsObject) {
  const auto planted = plant_embeddings(two_object_scene());
  // A 7 x 7 px object in the middle of a 61 x 61 image.
  const auto frame =
      synthetic_frame(61, 61, 1.0, [](int x, int y) { return std::abs(x - 30) <= 3 && std::abs(y - 30) <= 3; });
  const auto cam = synthetic_camera(61, 61, 10.0);
  double prev = 2.0;
  // Crop half-width 0.5 s fx: from 4 px up to 24 px in 2 px steps.
  for (int half = 4; half <= 24; half += 2) {
    const double s = 2.0 * half / cam.fx;
    const auto rec = embedding_targets(frame, cam, planted, s, 61, 61);
    const double sim = cell(rec, 30, 30, planted.dim).dot(planted.objects[0]);
    EXPECT_LT(sim, prev) << "half=" << half;
    prev = sim;
  }
}

TEST(Simworld, TargetsAreUnitNormEverywhere) {
  const SceneSpec scene = two_object_scene();
  const Raytracer rt(scene);
  const auto planted = plant_embeddings(scene);
  PinholeCamera cam = tiny_intrinsics();
  cam.pose = look_at({1.2, -1.0, 1.2}, {0.0, 0.0, 0.3});
  const auto frame = rt.render(cam);
  for (double s : {0.05, 0.3, 2.0}) {
    const auto rec = embedding_targets(frame, cam, planted, s, 6, 8);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 8; ++c) EXPECT_NEAR(cell(rec, r, c, planted.dim).norm(), 1.0, 1e-6);
  }
}

TEST(Simworld, GenerationIsDeterministic) {
  const auto a = fresh_dir("legs_sim_det_a"), b = fresh_dir("legs_sim_det_b");
  auto traj = tiny_trajectory();
  traj.sigma_t = 0.002;
  traj.embeddings = true;
  traj.embedding_levels = 2;
  generate_stream(two_object_scene(), traj, two_camera_rig(), a);
  generate_stream(two_object_scene(), traj, two_camera_rig(), b);
  auto slurp = [](const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  for (const char* f : {"manifest.jsonl", "gt.json", "annotations.json", "queries.legsemb",
                        "emb/000003_left.legsemb", "rgb/000002_front.png"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

}  // namespace
}  // namespace legs::sim
