#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "legs/checkpoint.hpp"
#include "legs/config.hpp"
#include "legs/session.hpp"
#include "legs/simworld.hpp"

namespace legs {
namespace {

constexpr const char* kTrainToml = R"(
seed = 5
[train]
iterations = 60
iterations_per_keyframe = 10
densify_from = 20
densify_interval = 20
eval_interval = 30
init_samples = 80
snapshot_interval = 10
[train.lr]
color = 0.01
[grid]
levels = 2
table_size = 256
features_per_level = 2
base_resolution = 4
max_resolution = 16
aabb_min = [-2.0, -2.0, 0.0]
aabb_max = [2.0, 2.0, 2.5]
[field]
hidden_layers = 1
hidden_width = 8
output_dim = 8
)";

sim::SceneSpec tiny_scene() {
  sim::SceneSpec s;
  s.embedding_dim = 8;
  sim::SceneObject o;
  o.name = "crate";
  o.center = Eigen::Vector3d(0.2, 0.1, 0.3);
  o.size = Eigen::Vector3d(0.5, 0.4, 0.6);
  s.objects = {o};
  return s;
}

RigConfig tiny_rig() {
  PinholeCamera c;
  c.width = 32;
  c.height = 24;
  c.fx = c.fy = 28;
  c.cx = 15.5;
  c.cy = 11.5;
  RigConfig rig;
  rig.primary = "front";
  rig.cameras.push_back({"front", c, Se3Pose{}});
  return rig;
}

/// A 4-step stream with embeddings, drift and one BA event.
fs::path tiny_stream() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "legs_session_stream";
    fs::remove_all(d);
    sim::TrajectorySpec t;
    t.steps = 4;
    t.sigma_t = 0.002;
    t.ba_every = 2;
    t.heldout_views = 2;
    t.embedding_levels = 2;
    sim::generate_stream(tiny_scene(), t, tiny_rig(), d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

TEST(Config, ParsesAndRoundTrips) {
  const RunConfig rc = parse_run_config(kTrainToml);
  EXPECT_EQ(rc.train.seed, 5u);
  EXPECT_EQ(rc.train.iterations, 60);
  EXPECT_EQ(rc.train.lr.color, 0.01);
  EXPECT_EQ(rc.field.grid.table_size, 256u);
  EXPECT_EQ(rc.field.grid.aabb_max.z(), 2.5);
  const std::string text = run_config_to_toml(rc);
  const RunConfig again = parse_run_config(text);
  EXPECT_EQ(run_config_to_toml(again), text);
  EXPECT_EQ(again.train.lr.mean, rc.train.lr.mean);
  EXPECT_EQ(again.train.densify_grad_threshold, rc.train.densify_grad_threshold);
}

TEST(Config, RejectsUnknownKeysWithTheirTable) {
  try {
    parse_run_config("[train]\nitertions = 5\n", "c.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("itertions"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[train]"), std::string::npos);
  }
  EXPECT_THROW(parse_run_config("[grid]\ntable_size = 1000\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[train]\niterations = \"many\"\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[train\n"), ConfigError);
}

TEST(Config, ParsesSceneTrajectoryAndRig) {
  const auto scene = scene_from_toml(toml::parse(R"(
seed = 2
embedding_dim = 16
[room]
min = [-1, -1, 0]
max = [1, 1, 2]
[[object]]
name = "ball"
primitive = "sphere"
center = [0, 0, 0.3]
radius = 0.2
[[object]]
name = "box"
center = [0.5, 0.5, 0.1]
size = [0.2, 0.2, 0.2]
yaw_deg = 90
)"), "scene.toml");
  ASSERT_EQ(scene.objects.size(), 2u);
  EXPECT_EQ(scene.objects[0].primitive, sim::Primitive::sphere);
  EXPECT_DOUBLE_EQ(scene.objects[0].radius(), 0.2);
  EXPECT_NEAR(scene.objects[1].yaw, M_PI / 2, 1e-15);

  const auto traj = trajectory_from_toml(toml::parse(R"(
path = "figure8"
steps = 10
ba_every = 5
[drift]
sigma_t = 0.002
sigma_r_deg = 0.1
)"), "traj.toml");
  EXPECT_EQ(traj.path, sim::PathKind::figure8);
  EXPECT_NEAR(traj.sigma_r, 0.1 * M_PI / 180, 1e-15);
  EXPECT_THROW(trajectory_from_toml(toml::parse("[drift]\nsigma = 1\n"), "t"), ConfigError);

  const auto rig = rig_from_toml(toml::parse(R"(
primary = "a"
[[camera]]
id = "a"
fx = 10
fy = 10
cx = 4.5
cy = 3.5
width = 10
height = 8
[[camera]]
id = "b"
fx = 10
fy = 10
cx = 4.5
cy = 3.5
width = 10
height = 8
yaw_deg = 90
)"), "rig.toml");
  const Se3Pose b = rig.camera("b").extrinsic;
  // +90 degrees of yaw turns the forward axis onto the primary's right.
  EXPECT_LT((b.rotation_matrix() * Eigen::Vector3d::UnitZ() - Eigen::Vector3d::UnitX()).norm(), 1e-12);
}

TEST(Session, BatchRunIsDeterministic) {
  auto run = [] {
    TrainingSession s(parse_run_config(kTrainToml), tiny_stream());
    std::ostringstream log;
    SessionOptions opt;
    opt.metrics = &log;
    const auto sum = s.run(opt);
    EXPECT_EQ(sum.iterations, 60u);
    EXPECT_EQ(sum.keyframes, 4u);
    EXPECT_EQ(sum.pose_updates, 2u);
    EXPECT_TRUE(sum.heldout_psnr.has_value());
    return log.str();
  };
  const std::string a = run();
  EXPECT_EQ(a, run());
  EXPECT_NE(a.find("\"event\":\"densify\""), std::string::npos);
  EXPECT_NE(a.find("\"lang\""), std::string::npos);
}

TEST(Session, FollowModeIngestsOneKeyframePerInterval) {
  TrainingSession s(parse_run_config(kTrainToml), tiny_stream());
  std::ostringstream log;
  SessionOptions opt;
  opt.follow = true;
  opt.metrics = &log;
  SnapshotSlot slot;
  opt.snapshots = &slot;
  s.run(opt);
  std::istringstream is(log.str());
  std::vector<std::uint64_t> at;
  for (std::string line; std::getline(is, line);) {
    const Json j = Json::parse(line);
    if (j.value("event", "") == "keyframe") at.push_back(j["iter"].get<std::uint64_t>());
  }
  EXPECT_EQ(at, (std::vector<std::uint64_t>{0, 10, 20, 30}));
  ASSERT_TRUE(slot.load());
  EXPECT_EQ(slot.load()->iteration, 60u);
}

TEST(Session, ResumeMatchesUninterruptedRun) {
  for (bool follow : {false, true}) {
    const RunConfig rc = parse_run_config(kTrainToml);
    SessionOptions opt;
    opt.follow = follow;
    TrainingSession straight(rc, tiny_stream());
    straight.run(opt);

    const std::string ck = (fs::temp_directory_path() / "legs_resume.ckpt").string();
    {
      TrainingSession first(rc, tiny_stream());
      SessionOptions part = opt;
      part.stop_at = 25;
      first.run(part);
      EXPECT_EQ(first.trainer().iteration(), 25u);
      first.save(ck);
    }
    const Checkpoint loaded = load_checkpoint(ck);
    TrainingSession second(loaded.config, tiny_stream());
    second.resume(loaded);
    second.run(opt);

    const auto& a = straight.trainer().state();
    const auto& b = second.trainer().state();
    EXPECT_EQ(a.iteration, b.iteration);
    EXPECT_EQ(a.gaussians.means, b.gaussians.means) << "follow=" << follow;
    EXPECT_EQ(a.gaussians.colors, b.gaussians.colors);
    EXPECT_EQ(a.field->tables(), b.field->tables());
    EXPECT_EQ(a.field->mlp_params(), b.field->mlp_params());
  }
}

TEST(Checkpoint, RoundTripsStateBitExactly) {
  TrainingSession s(parse_run_config(kTrainToml), tiny_stream());
  SessionOptions opt;
  opt.stop_at = 15;
  s.run(opt);
  const std::string path = (fs::temp_directory_path() / "legs_rt.ckpt").string();
  s.save(path);
  const Checkpoint ck = load_checkpoint(path);
  const auto& st = s.trainer().state();
  EXPECT_EQ(ck.state.iteration, 15u);
  EXPECT_EQ(ck.cursor, s.cursor());
  EXPECT_EQ(ck.state.gaussians.means, st.gaussians.means);
  EXPECT_EQ(ck.state.gaussians.anchors, st.gaussians.anchors);
  EXPECT_EQ(ck.state.moments[0].m, st.moments[0].m);
  EXPECT_EQ(ck.state.mlp_moments.v, st.mlp_moments.v);
  EXPECT_EQ(ck.state.scene_extent, st.scene_extent);
  EXPECT_TRUE(ck.state.rng == st.rng);
  EXPECT_TRUE(ck.state.lang_rng == st.lang_rng);
  const auto snap = snapshot_from_checkpoint(ck);
  EXPECT_TRUE(snap->has_field);
  EXPECT_EQ(snap->gaussians.size(), st.gaussians.size());
}

TEST(Checkpoint, RejectsCorruptFiles) {
  TrainingSession s(parse_run_config(kTrainToml), tiny_stream());
  SessionOptions opt;
  opt.stop_at = 2;
  s.run(opt);
  const std::string path = (fs::temp_directory_path() / "legs_bad.ckpt").string();
  s.save(path);
  std::string bytes = slurp(path);
  {
    std::string bad = bytes;
    bad[3] = 'X';
    std::ofstream(path, std::ios::binary) << bad;
    try {
      load_checkpoint(path);
      FAIL();
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
    }
  }
  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_checkpoint(path), DataError);
}

}  // namespace
}  // namespace legs
