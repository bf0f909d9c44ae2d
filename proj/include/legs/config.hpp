#pragma once

// TOML configuration files. Every table rejects keys it does not know.
//
//   train config: [train] [train.lr] [grid] [field], optional top-level seed
//   scene:        seed, embedding_dim, negatives, [room], [[object]]
//   trajectory:   path settings, [drift], [heldout], [embeddings]
//   rig:          primary, [[camera]]

#include <toml.hpp>

#include <cmath>
#include <set>
#include <sstream>
#include <string>

#include "legs/errors.hpp"
#include "legs/lang_field.hpp"
#include "legs/simworld.hpp"
#include "legs/stream.hpp"
#include "legs/trainer.hpp"

namespace legs {

namespace detail {

/// Typed access to one TOML table that remembers which keys were read.
class TomlTable {
 public:
  TomlTable(const toml::table& t, std::string where) : t_(t), where_(std::move(where)) {}

  ~TomlTable() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [k, v] : t_) {
      const std::string key(k.str());
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

  bool has(const char* key) const { return t_.contains(key); }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const toml::node* n = t_.get(key);
    if (!n) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!n->is_boolean()) fail(key, "a boolean");
      out = n->as_boolean()->get();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!n->is_string()) fail(key, "a string");
      out = n->as_string()->get();
    } else if constexpr (std::is_integral_v<T>) {
      if (!n->is_integer()) fail(key, "an integer");
      const std::int64_t v = n->as_integer()->get();
      if (std::is_unsigned_v<T> && v < 0) fail(key, "a non-negative integer");
      out = static_cast<T>(v);
    } else {
      if (!n->is_number()) fail(key, "a number");
      out = static_cast<T>(n->is_integer() ? static_cast<double>(n->as_integer()->get())
                                           : n->as_floating_point()->get());
    }
  }

  template <int N>
  void vec(const char* key, Eigen::Matrix<double, N, 1>& out) {
    seen_.insert(key);
    const toml::node* n = t_.get(key);
    if (!n) return;
    const toml::array* a = n->as_array();
    if (!a || a->size() != static_cast<std::size_t>(N)) fail(key, "an array of " + std::to_string(N) + " numbers");
    for (int i = 0; i < N; ++i) {
      const toml::node& e = *a->get(i);
      if (!e.is_number()) fail(key, "an array of numbers");
      out[i] = e.is_integer() ? static_cast<double>(e.as_integer()->get()) : e.as_floating_point()->get();
    }
  }

  void array3(const char* key, std::array<double, 3>& out) {
    Eigen::Vector3d v(out[0], out[1], out[2]);
    vec<3>(key, v);
    out = {v[0], v[1], v[2]};
  }

  /// Optional sub-table.
  const toml::table* table(const char* key) {
    seen_.insert(key);
    const toml::node* n = t_.get(key);
    if (!n) return nullptr;
    if (!n->is_table()) fail(key, "a table");
    return n->as_table();
  }

  /// Optional array of tables.
  const toml::array* tables(const char* key) {
    seen_.insert(key);
    const toml::node* n = t_.get(key);
    if (!n) return nullptr;
    if (!n->is_array_of_tables()) fail(key, "an array of tables");
    return n->as_array();
  }

  const std::string& where() const { return where_; }

 private:
  [[noreturn]] void fail(const char* key, const std::string& what) const {
    throw ConfigError(where_ + ": '" + key + "' must be " + what);
  }

  const toml::table& t_;
  std::string where_;
  std::set<std::string> seen_;
};

inline toml::table parse_toml(const std::string& text, const std::string& where) {
  try {
    return toml::parse(text, where);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << where << ":" << e.source().begin.line << ": " << e.description();
    throw ConfigError(os.str());
  }
}

inline toml::table parse_toml_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_toml(ss.str(), path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Train config
// ---------------------------------------------------------------------------

struct RunConfig {
  TrainConfig train;
  LangFieldConfig field;

  void validate() const {
    train.validate();
    field.validate();
  }
};

inline RunConfig run_config_from_toml(const toml::table& root, const std::string& where) {
  RunConfig rc;
  detail::TomlTable top(root, where);
  std::optional<std::uint64_t> seed;
  if (top.has("seed")) {
    std::uint64_t s = 0;
    top.get("seed", s);
    seed = s;
  }
  if (const auto* t = top.table("train")) {
    detail::TomlTable tr(*t, where + " [train]");
    TrainConfig& c = rc.train;
    tr.get("lambda_ssim", c.lambda_ssim);
    tr.get("lambda_lang", c.lambda_lang);
    tr.get("language", c.language);
    tr.get("densify_interval", c.densify_interval);
    tr.get("densify_from", c.densify_from);
    tr.get("densify_until", c.densify_until);
    tr.get("densify_grad_threshold", c.densify_grad_threshold);
    tr.get("split_scale_fraction", c.split_scale_fraction);
    tr.get("prune_opacity", c.prune_opacity);
    tr.get("max_gaussians", c.max_gaussians);
    tr.get("init_samples", c.init_samples);
    std::string sampling = scale_sampling_name(c.scale_sampling);
    tr.get("scale_sampling", sampling);
    if (sampling == "log_uniform") c.scale_sampling = ScaleSampling::log_uniform;
    else if (sampling == "uniform") c.scale_sampling = ScaleSampling::uniform;
    else throw ConfigError(where + " [train]: scale_sampling must be 'log_uniform' or 'uniform'");
    tr.get("iterations", c.iterations);
    tr.get("seed", c.seed);
    tr.get("iterations_per_keyframe", c.iterations_per_keyframe);
    tr.get("eval_interval", c.eval_interval);
    tr.get("nan_check_interval", c.nan_check_interval);
    tr.get("snapshot_interval", c.snapshot_interval);
    tr.get("lang_downsample", c.lang_downsample);
    tr.get("scene_extent", c.scene_extent);
    tr.array3("background", c.background);
    tr.get("rebase_gaussians", c.rebase_gaussians);
    if (const auto* l = tr.table("lr")) {
      detail::TomlTable lr(*l, where + " [train.lr]");
      lr.get("mean", c.lr.mean);
      lr.get("log_scale", c.lr.log_scale);
      lr.get("rotation", c.lr.rotation);
      lr.get("opacity", c.lr.opacity);
      lr.get("color", c.lr.color);
      lr.get("field", c.lr.field);
    }
  }
  if (const auto* t = top.table("grid")) {
    detail::TomlTable g(*t, where + " [grid]");
    HashGridConfig& c = rc.field.grid;
    g.get("levels", c.levels);
    g.get("table_size", c.table_size);
    g.get("features_per_level", c.features_per_level);
    g.get("base_resolution", c.base_resolution);
    g.get("max_resolution", c.max_resolution);
    g.vec<3>("aabb_min", c.aabb_min);
    g.vec<3>("aabb_max", c.aabb_max);
  }
  if (const auto* t = top.table("field")) {
    detail::TomlTable f(*t, where + " [field]");
    LangFieldConfig& c = rc.field;
    f.get("hidden_layers", c.hidden_layers);
    f.get("hidden_width", c.hidden_width);
    f.get("output_dim", c.output_dim);
    f.get("scale_min", c.scale_min);
    f.get("scale_max", c.scale_max);
  }
  if (seed) rc.train.seed = *seed;
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_toml(detail::parse_toml_file(path), path);
}

inline RunConfig parse_run_config(const std::string& text, const std::string& where = "config") {
  return run_config_from_toml(detail::parse_toml(text, where), where);
}

namespace detail {

inline toml::array toml_vec(const Eigen::Vector3d& v) { return toml::array{v.x(), v.y(), v.z()}; }

}  // namespace detail

/// Canonical TOML text of a run config; parse_run_config inverts it.
inline std::string run_config_to_toml(const RunConfig& rc) {
  const TrainConfig& c = rc.train;
  toml::table lr{{"mean", c.lr.mean},         {"log_scale", c.lr.log_scale}, {"rotation", c.lr.rotation},
                 {"opacity", c.lr.opacity},   {"color", c.lr.color},         {"field", c.lr.field}};
  toml::table train{{"lambda_ssim", c.lambda_ssim},
                    {"lambda_lang", c.lambda_lang},
                    {"language", c.language},
                    {"densify_interval", c.densify_interval},
                    {"densify_from", c.densify_from},
                    {"densify_until", c.densify_until},
                    {"densify_grad_threshold", c.densify_grad_threshold},
                    {"split_scale_fraction", c.split_scale_fraction},
                    {"prune_opacity", c.prune_opacity},
                    {"max_gaussians", static_cast<std::int64_t>(c.max_gaussians)},
                    {"init_samples", c.init_samples},
                    {"scale_sampling", scale_sampling_name(c.scale_sampling)},
                    {"iterations", c.iterations},
                    {"seed", static_cast<std::int64_t>(c.seed)},
                    {"iterations_per_keyframe", c.iterations_per_keyframe},
                    {"eval_interval", c.eval_interval},
                    {"nan_check_interval", c.nan_check_interval},
                    {"snapshot_interval", c.snapshot_interval},
                    {"lang_downsample", c.lang_downsample},
                    {"scene_extent", c.scene_extent},
                    {"background", toml::array{c.background[0], c.background[1], c.background[2]}},
                    {"rebase_gaussians", c.rebase_gaussians},
                    {"lr", lr}};
  const HashGridConfig& g = rc.field.grid;
  toml::table grid{{"levels", g.levels},
                   {"table_size", static_cast<std::int64_t>(g.table_size)},
                   {"features_per_level", g.features_per_level},
                   {"base_resolution", g.base_resolution},
                   {"max_resolution", g.max_resolution},
                   {"aabb_min", detail::toml_vec(g.aabb_min)},
                   {"aabb_max", detail::toml_vec(g.aabb_max)}};
  toml::table field{{"hidden_layers", rc.field.hidden_layers},
                    {"hidden_width", rc.field.hidden_width},
                    {"output_dim", rc.field.output_dim},
                    {"scale_min", rc.field.scale_min},
                    {"scale_max", rc.field.scale_max}};
  toml::table root{{"train", train}, {"grid", grid}, {"field", field}};
  std::ostringstream os;
  os << root << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Rig, scene and trajectory
// ---------------------------------------------------------------------------

inline RigConfig rig_from_toml(const toml::table& root, const std::string& where) {
  RigConfig rig;
  detail::TomlTable top(root, where);
  top.get("primary", rig.primary);
  if (const auto* cams = top.tables("camera")) {
    for (std::size_t i = 0; i < cams->size(); ++i) {
      detail::TomlTable t(*cams->get(i)->as_table(), where + " [[camera]] #" + std::to_string(i + 1));
      RigCamera c;
      t.get("id", c.id);
      t.get("fx", c.intrinsics.fx);
      t.get("fy", c.intrinsics.fy);
      t.get("cx", c.intrinsics.cx);
      t.get("cy", c.intrinsics.cy);
      t.get("width", c.intrinsics.width);
      t.get("height", c.intrinsics.height);
      Eigen::Vector3d et = Eigen::Vector3d::Zero();
      Eigen::Vector4d eq(1, 0, 0, 0);
      double yaw_deg = 0;
      t.vec<3>("extrinsic_t", et);
      t.vec<4>("extrinsic_q", eq);
      t.get("yaw_deg", yaw_deg);
      if (t.has("yaw_deg") && t.has("extrinsic_q"))
        throw ConfigError(t.where() + ": give either yaw_deg or extrinsic_q, not both");
      Eigen::Quaterniond q(eq[0], eq[1], eq[2], eq[3]);
      // Yaw turns about the camera's down axis: positive looks right.
      if (t.has("yaw_deg")) q = Eigen::AngleAxisd(yaw_deg * M_PI / 180.0, Eigen::Vector3d::UnitY());
      c.extrinsic = Se3Pose(et, q);
      rig.cameras.push_back(c);
    }
  }
  rig.validate();
  return rig;
}

inline sim::SceneSpec scene_from_toml(const toml::table& root, const std::string& where) {
  sim::SceneSpec s;
  detail::TomlTable top(root, where);
  top.get("seed", s.seed);
  top.get("embedding_dim", s.embedding_dim);
  top.get("negatives", s.negatives);
  if (const auto* r = top.table("room")) {
    detail::TomlTable room(*r, where + " [room]");
    room.vec<3>("min", s.room_min);
    room.vec<3>("max", s.room_max);
    room.vec<3>("color", s.background);
  }
  if (const auto* objs = top.tables("object")) {
    for (std::size_t i = 0; i < objs->size(); ++i) {
      detail::TomlTable t(*objs->get(i)->as_table(), where + " [[object]] #" + std::to_string(i + 1));
      sim::SceneObject o;
      t.get("name", o.name);
      std::string prim = "box";
      t.get("primitive", prim);
      if (prim == "box") o.primitive = sim::Primitive::box;
      else if (prim == "sphere") o.primitive = sim::Primitive::sphere;
      else throw ConfigError(t.where() + ": primitive must be 'box' or 'sphere'");
      t.vec<3>("center", o.center);
      t.vec<3>("color", o.color);
      if (o.primitive == sim::Primitive::sphere) {
        double radius = 0.1;
        t.get("radius", radius);
        o.size = Eigen::Vector3d::Constant(2 * radius);
      } else {
        t.vec<3>("size", o.size);
        double yaw_deg = 0;
        t.get("yaw_deg", yaw_deg);
        o.yaw = yaw_deg * M_PI / 180.0;
      }
      s.objects.push_back(o);
    }
  }
  s.validate();
  return s;
}

inline sim::TrajectorySpec trajectory_from_toml(const toml::table& root, const std::string& where) {
  sim::TrajectorySpec t;
  detail::TomlTable top(root, where);
  std::string path = "loop";
  top.get("path", path);
  if (path == "loop") t.path = sim::PathKind::loop;
  else if (path == "line") t.path = sim::PathKind::line;
  else if (path == "figure8") t.path = sim::PathKind::figure8;
  else throw ConfigError(where + ": path must be 'loop', 'line' or 'figure8'");
  top.get("seed", t.seed);
  top.vec<3>("center", t.center);
  top.get("radius", t.radius);
  top.get("height_amplitude", t.height_amplitude);
  top.vec<3>("look_at", t.look_at);
  top.get("steps", t.steps);
  top.get("turns", t.turns);
  top.get("step_dt", t.step_dt);
  top.get("ba_every", t.ba_every);
  if (const auto* d = top.table("drift")) {
    detail::TomlTable drift(*d, where + " [drift]");
    double sigma_r_deg = t.sigma_r * 180.0 / M_PI;
    drift.get("sigma_t", t.sigma_t);
    drift.get("sigma_r_deg", sigma_r_deg);
    t.sigma_r = sigma_r_deg * M_PI / 180.0;
  }
  if (const auto* h = top.table("heldout")) {
    detail::TomlTable ho(*h, where + " [heldout]");
    ho.get("views", t.heldout_views);
    ho.get("radius", t.heldout_radius);
    ho.get("height", t.heldout_height);
  }
  if (const auto* e = top.table("embeddings")) {
    detail::TomlTable em(*e, where + " [embeddings]");
    em.get("enabled", t.embeddings);
    em.get("levels", t.embedding_levels);
    em.get("scale_min", t.embedding_scale_min);
    em.get("scale_max", t.embedding_scale_max);
    em.get("downsample", t.embedding_downsample);
  }
  t.validate();
  return t;
}

inline RigConfig load_rig(const std::string& path) { return rig_from_toml(detail::parse_toml_file(path), path); }
inline sim::SceneSpec load_scene(const std::string& path) {
  return scene_from_toml(detail::parse_toml_file(path), path);
}
inline sim::TrajectorySpec load_trajectory(const std::string& path) {
  return trajectory_from_toml(detail::parse_toml_file(path), path);
}

}  // namespace legs
