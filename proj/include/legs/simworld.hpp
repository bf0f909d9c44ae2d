#pragma once

// Synthetic ground truth: a textured room with box and sphere objects,
// ray-traced colour / depth / instance images, planted object embeddings and
// the crop-mixture embedding-target oracle.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "legs/embeddings.hpp"
#include "legs/errors.hpp"
#include "legs/geom.hpp"
#include "legs/json_codec.hpp"
#include "legs/stream.hpp"

namespace legs::sim {

enum class Primitive { box, sphere };

struct SceneObject {
  std::string name;
  Primitive primitive = Primitive::box;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Constant(0.2);  // box: full extents; sphere: diameter in x
  double yaw = 0.0;                                        // radians about world +z (boxes)
  Eigen::Vector3d color = Eigen::Vector3d::Constant(0.5);

  double radius() const { return 0.5 * size.x(); }
};

struct SceneSpec {
  Eigen::Vector3d room_min = Eigen::Vector3d(-2, -2, 0);
  Eigen::Vector3d room_max = Eigen::Vector3d(2, 2, 2.5);
  Eigen::Vector3d background = Eigen::Vector3d(0.6, 0.55, 0.5);  // wall base colour
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
  int embedding_dim = 64;
  int negatives = 4;

  void validate() const {
    if (!((room_max - room_min).array() > 0).all()) throw ConfigError("room must have positive extent");
    if (embedding_dim < static_cast<int>(objects.size()) + 1)
      throw ConfigError("embedding_dim must exceed the object count for orthogonal planting");
    std::vector<std::string> names;
    for (const auto& o : objects) {
      if (o.name.empty()) throw ConfigError("scene objects need a name");
      if (std::find(names.begin(), names.end(), o.name) != names.end())
        throw ConfigError("duplicate object name '" + o.name + "'");
      names.push_back(o.name);
      if (!(o.size.array() > 0).all()) throw ConfigError("object '" + o.name + "' needs positive size");
      const auto [lo, hi] = aabb_of(o);
      if ((lo.array() < room_min.array() - 1e-9).any() || (hi.array() > room_max.array() + 1e-9).any())
        throw ConfigError("object '" + o.name + "' is not inside the room");
    }
    if (negatives < 1) throw ConfigError("at least one negative embedding is required");
  }

  /// World-axis-aligned bounds of an object.
  static std::pair<Eigen::Vector3d, Eigen::Vector3d> aabb_of(const SceneObject& o) {
    if (o.primitive == Primitive::sphere) {
      const Eigen::Vector3d r = Eigen::Vector3d::Constant(o.radius());
      return {o.center - r, o.center + r};
    }
    const double c = std::abs(std::cos(o.yaw)), s = std::abs(std::sin(o.yaw));
    const Eigen::Vector3d h(0.5 * (c * o.size.x() + s * o.size.y()), 0.5 * (s * o.size.x() + c * o.size.y()),
                            0.5 * o.size.z());
    return {o.center - h, o.center + h};
  }
};

/// Planted embeddings: one per object then the background, pairwise
/// orthonormal (Gram-Schmidt of Gaussian draws), plus random unit negatives.
struct PlantedEmbeddings {
  int dim = 0;
  std::vector<Eigen::VectorXd> objects;
  Eigen::VectorXd background;
  std::vector<Eigen::VectorXd> negatives;

  const Eigen::VectorXd& of_instance(int instance) const {
    return instance <= 0 ? background : objects[instance - 1];
  }
};

inline PlantedEmbeddings plant_embeddings(const SceneSpec& scene) {
  scene.validate();
  PlantedEmbeddings out;
  out.dim = scene.embedding_dim;
  std::mt19937_64 rng(scene.seed * 7919 + 17);
  std::normal_distribution<double> n(0.0, 1.0);
  auto draw = [&] {
    Eigen::VectorXd v(out.dim);
    for (int k = 0; k < out.dim; ++k) v[k] = n(rng);
    return v;
  };
  std::vector<Eigen::VectorXd> basis;
  const std::size_t needed = scene.objects.size() + 1;
  while (basis.size() < needed) {
    Eigen::VectorXd v = draw();
    for (const auto& b : basis) v -= b * b.dot(v);
    const double nrm = v.norm();
    if (nrm < 1e-6) continue;
    basis.push_back(v / nrm);
  }
  out.objects.assign(basis.begin(), basis.end() - 1);
  out.background = basis.back();
  for (int i = 0; i < scene.negatives; ++i) out.negatives.push_back(draw().normalized());
  return out;
}

// ---------------------------------------------------------------------------
// Ray tracing
// ---------------------------------------------------------------------------

struct Hit {
  double t = std::numeric_limits<double>::infinity();  // along the unnormalized camera ray: z-depth
  int instance = -1;                                   // 0 room, k object k-1
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
};

namespace detail {

inline Eigen::Matrix3d yaw_matrix(double yaw) {
  return Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

/// Entry intersection of a ray starting outside an axis-aligned box centred
/// at the origin with half extents h. Returns t and the entry axis.
inline std::optional<std::pair<double, int>> slab_entry(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                                                        const Eigen::Vector3d& h) {
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-300) {
      if (std::abs(o[a]) > h[a]) return std::nullopt;
      continue;
    }
    double ta = (-h[a] - o[a]) / d[a], tb = (h[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis = a;
    }
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t0 <= 0 || axis < 0) return std::nullopt;
  return std::make_pair(t0, axis);
}

inline double hash_phase(int instance, int k) {
  // Fixed per-instance phases for the sinusoidal textures.
  return std::fmod(0.7548776662 * (instance * 13 + k * 7 + 1), 1.0) * 2 * M_PI;
}

}  // namespace detail

class Raytracer {
 public:
  explicit Raytracer(SceneSpec scene) : scene_(std::move(scene)) { scene_.validate(); }

  const SceneSpec& scene() const { return scene_; }

  Hit trace(const Eigen::Vector3d& origin, const Eigen::Vector3d& dir) const {
    Hit best;
    // Room interior: exit through the nearest far slab.
    for (int a = 0; a < 3; ++a) {
      if (std::abs(dir[a]) < 1e-300) continue;
      const double bound = dir[a] > 0 ? scene_.room_max[a] : scene_.room_min[a];
      const double t = (bound - origin[a]) / dir[a];
      if (t > 0 && t < best.t) {
        best.t = t;
        best.instance = 0;
        best.normal = Eigen::Vector3d::Zero();
        best.normal[a] = dir[a] > 0 ? -1.0 : 1.0;
      }
    }
    for (std::size_t i = 0; i < scene_.objects.size(); ++i) {
      const SceneObject& o = scene_.objects[i];
      if (o.primitive == Primitive::sphere) {
        const Eigen::Vector3d oc = origin - o.center;
        const double a = dir.squaredNorm(), b = oc.dot(dir), c = oc.squaredNorm() - o.radius() * o.radius();
        const double disc = b * b - a * c;
        if (disc < 0) continue;
        const double t = (-b - std::sqrt(disc)) / a;
        if (t > 0 && t < best.t) {
          best.t = t;
          best.instance = static_cast<int>(i) + 1;
          best.normal = (origin + t * dir - o.center).normalized();
        }
      } else {
        const Eigen::Matrix3d r = detail::yaw_matrix(o.yaw);
        const Eigen::Vector3d lo = r.transpose() * (origin - o.center), ld = r.transpose() * dir;
        const auto e = detail::slab_entry(lo, ld, 0.5 * o.size);
        if (e && e->first < best.t) {
          best.t = e->first;
          best.instance = static_cast<int>(i) + 1;
          Eigen::Vector3d n = Eigen::Vector3d::Zero();
          n[e->second] = ld[e->second] > 0 ? -1.0 : 1.0;
          best.normal = r * n;
        }
      }
    }
    if (best.instance >= 0) best.point = origin + best.t * dir;
    return best;
  }

  /// Signed distance from p to the surface of an instance (room: distance to
  /// the nearest wall, positive inside).
  double surface_distance(int instance, const Eigen::Vector3d& p) const {
    if (instance == 0) {
      const Eigen::Vector3d a = p - scene_.room_min, b = scene_.room_max - p;
      return std::min(a.minCoeff(), b.minCoeff());
    }
    const SceneObject& o = scene_.objects[instance - 1];
    if (o.primitive == Primitive::sphere) return (p - o.center).norm() - o.radius();
    const Eigen::Vector3d q = (detail::yaw_matrix(o.yaw).transpose() * (p - o.center)).cwiseAbs() - 0.5 * o.size;
    return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
  }

  /// Procedural albedo: base colour modulated by sums of sines in world space.
  Eigen::Vector3d shade(const Hit& h) const {
    if (h.instance < 0) return Eigen::Vector3d::Zero();
    Eigen::Vector3d base;
    double f1, f2;
    if (h.instance == 0) {
      int axis = 0;
      h.normal.cwiseAbs().maxCoeff(&axis);
      const double side = h.normal[axis] > 0 ? 0 : 1;
      base = scene_.background;
      base[axis] = std::clamp(base[axis] * (0.7 + 0.4 * side), 0.05, 0.95);
      f1 = 5.0;
      f2 = 3.0;
    } else {
      base = scene_.objects[h.instance - 1].color;
      f1 = 9.0;
      f2 = 6.0;
    }
    const Eigen::Vector3d& p = h.point;
    const double ph1 = detail::hash_phase(h.instance, 1), ph2 = detail::hash_phase(h.instance, 2);
    const double pattern = 0.5 * std::sin(2 * M_PI * f1 * (p.x() + 0.6 * p.y() + 0.3 * p.z()) + ph1) +
                           0.5 * std::sin(2 * M_PI * f2 * (0.4 * p.x() - p.y() + 0.8 * p.z()) + ph2);
    const Eigen::Vector3d tint(0.9 + 0.1 * std::sin(ph1), 1.0, 0.9 + 0.1 * std::cos(ph2));
    const Eigen::Vector3d c = base.cwiseProduct(tint) * (0.8 + 0.2 * pattern);
    return c.cwiseMax(0.0).cwiseMin(1.0);
  }

  struct Frame {
    Image color, depth;
    std::vector<int> instance;
  };

  Frame render(const PinholeCamera& cam) const {
    Frame f;
    f.color = Image(cam.width, cam.height, 3);
    f.depth = Image(cam.width, cam.height, 1);
    f.instance.assign(static_cast<std::size_t>(cam.width) * cam.height, -1);
    const Eigen::Matrix3d r = cam.pose.rotation_matrix();
#pragma omp parallel for schedule(static)
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        const Eigen::Vector3d d = r * Eigen::Vector3d((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0);
        const Hit h = trace(cam.pose.translation, d);
        const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
        if (h.instance < 0) continue;
        const Eigen::Vector3d c = shade(h);
        for (int k = 0; k < 3; ++k) f.color.data[3 * p + k] = static_cast<float>(c[k]);
        f.depth.data[p] = static_cast<float>(h.t);
        f.instance[p] = h.instance;
      }
    return f;
  }

 private:
  SceneSpec scene_;
};

// ---------------------------------------------------------------------------
// Embedding-target oracle
// ---------------------------------------------------------------------------

/// Per-instance summed-area tables over an instance image.
class InstanceAreas {
 public:
  InstanceAreas(const std::vector<int>& instance, int width, int height, int instances)
      : w_(width), h_(height), n_(instances), sat_(static_cast<std::size_t>(instances) * (width + 1) * (height + 1), 0) {
    for (int k = 0; k < n_; ++k)
      for (int y = 0; y < h_; ++y)
        for (int x = 0; x < w_; ++x) {
          const int v = instance[static_cast<std::size_t>(y) * w_ + x] == k ? 1 : 0;
          at(k, x + 1, y + 1) = v + at(k, x, y + 1) + at(k, x + 1, y) - at(k, x, y);
        }
  }

  /// Pixel count of instance k in the inclusive rectangle [x0, x1] x [y0, y1].
  std::int64_t count(int k, int x0, int y0, int x1, int y1) const {
    return get(k, x1 + 1, y1 + 1) - get(k, x0, y1 + 1) - get(k, x1 + 1, y0) + get(k, x0, y0);
  }

 private:
  std::int64_t& at(int k, int x, int y) { return sat_[(static_cast<std::size_t>(k) * (h_ + 1) + y) * (w_ + 1) + x]; }
  std::int64_t get(int k, int x, int y) const {
    return sat_[(static_cast<std::size_t>(k) * (h_ + 1) + y) * (w_ + 1) + x];
  }

  int w_, h_, n_;
  std::vector<std::int64_t> sat_;
};

/// Target grid at physical scale s: each cell takes the square crop of side
/// s (converted to pixels at the cell's depth) around the cell centre and
/// returns the normalized area-weighted mean of the planted embeddings.
inline EmbeddingRecord embedding_targets(const Raytracer::Frame& frame, const PinholeCamera& cam,
                                         const PlantedEmbeddings& planted, double s, int rows, int cols) {
  const int instances = static_cast<int>(planted.objects.size()) + 1;
  const InstanceAreas areas(frame.instance, cam.width, cam.height, instances);
  EmbeddingRecord rec;
  rec.kind = EmbeddingKind::grid;
  rec.scale = static_cast<float>(s);
  rec.rows = rows;
  rec.cols = cols;
  rec.data.resize(static_cast<std::size_t>(rows) * cols * planted.dim);
  const double kx = static_cast<double>(cam.width) / cols, ky = static_cast<double>(cam.height) / rows;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double u = (c + 0.5) * kx - 0.5, v = (r + 0.5) * ky - 0.5;
      const int px = std::clamp(static_cast<int>(std::lround(u)), 0, cam.width - 1);
      const int py = std::clamp(static_cast<int>(std::lround(v)), 0, cam.height - 1);
      const double depth = frame.depth.data[static_cast<std::size_t>(py) * cam.width + px];
      const double half = depth > 0 ? 0.5 * s * cam.fx / depth : 0.0;
      int x0 = static_cast<int>(std::ceil(u - half)), x1 = static_cast<int>(std::floor(u + half));
      int y0 = static_cast<int>(std::ceil(v - half)), y1 = static_cast<int>(std::floor(v + half));
      if (x0 > x1) x0 = x1 = px;
      if (y0 > y1) y0 = y1 = py;
      x0 = std::max(x0, 0);
      y0 = std::max(y0, 0);
      x1 = std::min(x1, cam.width - 1);
      y1 = std::min(y1, cam.height - 1);
      Eigen::VectorXd acc = Eigen::VectorXd::Zero(planted.dim);
      for (int k = 0; k < instances; ++k) {
        const std::int64_t n = areas.count(k, x0, y0, x1, y1);
        if (n) acc += static_cast<double>(n) * planted.of_instance(k);
      }
      if (acc.norm() == 0) acc = planted.background;
      acc.normalize();
      float* dst = &rec.data[(static_cast<std::size_t>(r) * cols + c) * planted.dim];
      for (int k = 0; k < planted.dim; ++k) dst[k] = static_cast<float>(acc[k]);
    }
  return rec;
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

enum class PathKind { loop, line, figure8 };

struct TrajectorySpec {
  PathKind path = PathKind::loop;
  Eigen::Vector3d center = Eigen::Vector3d(0, 0, 1.3);  // path centre
  double radius = 1.3;
  double height_amplitude = 0.15;
  Eigen::Vector3d look_at = Eigen::Vector3d(0, 0, 0.4);
  int steps = 24;          // rig steps; every camera emits a keyframe per step
  double turns = 1.0;      // loops around the path
  double step_dt = 0.5;    // seconds between rig steps
  double sigma_t = 0.0;    // metres per step, per axis
  double sigma_r = 0.0;    // radians per step, per axis
  int ba_every = 0;        // rig steps between BA events; 0 = never
  int heldout_views = 6;
  double heldout_radius = 1.1;
  double heldout_height = 1.0;
  bool embeddings = true;
  int embedding_levels = 8;
  double embedding_scale_min = 0.05;
  double embedding_scale_max = 2.0;
  int embedding_downsample = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1) throw ConfigError("trajectory needs at least one step");
    if (sigma_t < 0 || sigma_r < 0) throw ConfigError("drift sigmas must be non-negative");
    if (ba_every < 0) throw ConfigError("ba_every must be >= 1 (or 0 for no BA)");
    if (embedding_levels < 1 || embedding_downsample < 1) throw ConfigError("embedding grid settings must be positive");
    if (!(embedding_scale_min > 0 && embedding_scale_max > embedding_scale_min))
      throw ConfigError("embedding scale range must satisfy 0 < min < max");
    if (heldout_views < 0) throw ConfigError("heldout_views must be non-negative");
  }

  std::vector<double> embedding_scales() const {
    std::vector<double> s;
    for (int i = 0; i < embedding_levels; ++i) {
      const double t = embedding_levels == 1 ? 0.0 : static_cast<double>(i) / (embedding_levels - 1);
      s.push_back(embedding_scale_min * std::pow(embedding_scale_max / embedding_scale_min, t));
    }
    return s;
  }
};

/// OpenCV-style camera-to-world pose (x right, y down, z forward) at
/// `position` looking at `target` with world +z up.
inline Se3Pose look_at(const Eigen::Vector3d& position, const Eigen::Vector3d& target) {
  const Eigen::Vector3d f = (target - position).normalized();
  Eigen::Vector3d right = f.cross(Eigen::Vector3d::UnitZ());
  if (right.norm() < 1e-9) right = Eigen::Vector3d::UnitX();
  right.normalize();
  const Eigen::Vector3d down = f.cross(right);
  Eigen::Matrix3d r;
  r.col(0) = right;
  r.col(1) = down;
  r.col(2) = f;
  return {position, Eigen::Quaterniond(r)};
}

inline Eigen::Vector3d path_position(const TrajectorySpec& t, double u) {
  const double a = 2 * M_PI * t.turns * u;
  Eigen::Vector3d p = t.center;
  switch (t.path) {
    case PathKind::loop:
      p += Eigen::Vector3d(t.radius * std::cos(a), t.radius * std::sin(a), 0);
      break;
    case PathKind::figure8:
      p += Eigen::Vector3d(t.radius * std::sin(a), t.radius * std::sin(a) * std::cos(a), 0);
      break;
    case PathKind::line:
      p += Eigen::Vector3d(t.radius * (2 * u - 1), 0, 0);
      break;
  }
  p.z() += t.height_amplitude * std::sin(3 * a);
  return p;
}

/// Ground-truth primary poses, one per rig step.
inline std::vector<Se3Pose> primary_poses(const TrajectorySpec& t) {
  std::vector<Se3Pose> out;
  for (int k = 0; k < t.steps; ++k) {
    const double u = static_cast<double>(k) / t.steps;
    out.push_back(look_at(path_position(t, u), t.look_at));
  }
  return out;
}

/// Accumulated estimation error per rig step: translation and rotation
/// random walks in the world frame, reset to zero right after each BA event.
struct DriftState {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();

  Se3Pose apply(const Se3Pose& truth) const {
    return {truth.translation + translation, rotation * truth.rotation};
  }
};

inline std::vector<DriftState> drift_sequence(const TrajectorySpec& t) {
  std::mt19937_64 rng(t.seed * 2654435761ull + 3);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<DriftState> out;
  DriftState d;
  for (int k = 0; k < t.steps; ++k) {
    const Eigen::Vector3d dt(n(rng), n(rng), n(rng));
    const Eigen::Vector3d dr(n(rng), n(rng), n(rng));
    d.translation += t.sigma_t * dt;
    const Eigen::Vector3d w = t.sigma_r * dr;
    if (w.norm() > 0) d.rotation = (Eigen::Quaterniond(Eigen::AngleAxisd(w.norm(), w.normalized())) * d.rotation).normalized();
    out.push_back(d);
    if (t.ba_every > 0 && (k + 1) % t.ba_every == 0) d = DriftState{};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stream generation
// ---------------------------------------------------------------------------

struct GeneratedStream {
  std::size_t keyframes = 0;
  std::size_t events = 0;
  std::size_t heldout = 0;
};

namespace detail {

inline std::string frame_name(std::uint64_t seq, const std::string& cam) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06llu", static_cast<unsigned long long>(seq));
  return std::string(buf) + "_" + cam;
}

inline Json vec_json(const Eigen::Vector3d& v) { return Json{v.x(), v.y(), v.z()}; }

}  // namespace detail

/// Annotation view for an object: among candidate cameras around the room,
/// the one whose centre ray sees the object with the largest projected box.
struct AnnotationView {
  std::string query;
  std::size_t query_index = 0;
  PinholeCamera camera;
  std::array<double, 4> box{};  // u_min, v_min, u_max, v_max
};

inline std::optional<std::array<double, 4>> project_box(const Eigen::Vector3d& lo, const Eigen::Vector3d& hi,
                                                        const PinholeCamera& cam) {
  double u0 = HUGE_VAL, v0 = HUGE_VAL, u1 = -HUGE_VAL, v1 = -HUGE_VAL;
  for (int c = 0; c < 8; ++c) {
    const Eigen::Vector3d p((c & 1) ? hi.x() : lo.x(), (c & 2) ? hi.y() : lo.y(), (c & 4) ? hi.z() : lo.z());
    const auto q = project_point(p, cam);
    if (!q.in_front) return std::nullopt;
    u0 = std::min(u0, q.u);
    v0 = std::min(v0, q.v);
    u1 = std::max(u1, q.u);
    v1 = std::max(v1, q.v);
  }
  u0 = std::max(u0, 0.0);
  v0 = std::max(v0, 0.0);
  u1 = std::min(u1, cam.width - 1.0);
  v1 = std::min(v1, cam.height - 1.0);
  if (u0 >= u1 || v0 >= v1) return std::nullopt;
  return std::array<double, 4>{u0, v0, u1, v1};
}

inline std::vector<AnnotationView> annotation_views(const Raytracer& rt, const PinholeCamera& intrinsics,
                                                    const TrajectorySpec& traj) {
  std::vector<AnnotationView> out;
  const SceneSpec& scene = rt.scene();
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& o = scene.objects[i];
    const auto [lo, hi] = SceneSpec::aabb_of(o);
    std::optional<AnnotationView> best;
    double best_area = -1;
    for (int c = 0; c < 24; ++c) {
      const double a = 2 * M_PI * (c + 0.5) / 24;
      for (double h : {traj.heldout_height, traj.heldout_height + 0.4}) {
        const Eigen::Vector3d pos = traj.center + Eigen::Vector3d(traj.heldout_radius * std::cos(a),
                                                                  traj.heldout_radius * std::sin(a), 0);
        Eigen::Vector3d p = pos;
        p.z() = h;
        PinholeCamera cam = intrinsics;
        cam.pose = look_at(p, o.center);
        const Eigen::Vector3d d = cam.pose.rotation_matrix() * Eigen::Vector3d(0, 0, 1);
        const Hit hit = rt.trace(p, d);
        if (hit.instance != static_cast<int>(i) + 1) continue;
        const auto box = project_box(lo, hi, cam);
        if (!box) continue;
        const double area = ((*box)[2] - (*box)[0]) * ((*box)[3] - (*box)[1]);
        if (area > best_area) {
          best_area = area;
          best = AnnotationView{o.name, i, cam, *box};
        }
      }
    }
    if (!best) throw ConfigError("no annotation view sees object '" + o.name + "'");
    out.push_back(*best);
  }
  return out;
}

inline Json annotations_to_json(const std::vector<AnnotationView>& views) {
  Json arr = Json::array();
  for (const auto& a : views)
    arr.push_back({{"query", a.query},
                   {"query_index", a.query_index},
                   {"camera", camera_to_json(a.camera)},
                   {"box", {a.box[0], a.box[1], a.box[2], a.box[3]}}});
  return arr;
}

/// Writes a full synthetic stream: manifest, images, optional embedding
/// targets, held-out views, annotations, query/negative embedding files and
/// the ground-truth sidecar gt.json.
inline GeneratedStream generate_stream(const SceneSpec& scene, const TrajectorySpec& traj, const RigConfig& rig,
                                       const fs::path& out) {
  scene.validate();
  traj.validate();
  rig.validate();
  const Raytracer rt(scene);
  const PlantedEmbeddings planted = plant_embeddings(scene);
  fs::create_directories(out);
  GeneratedStream stats;

  const auto truth = primary_poses(traj);
  const auto drift = drift_sequence(traj);
  const auto scales = traj.embedding_scales();

  std::vector<StreamRecord> records;
  std::vector<std::pair<std::uint64_t, Se3Pose>> history;  // (seq, true pose) of every keyframe so far
  Json true_poses = Json::array();
  std::uint64_t seq = 0;
  for (int k = 0; k < traj.steps; ++k) {
    for (const auto& rc : rig.cameras) {
      const Se3Pose gt = rig_camera_pose(truth[k], rig, rc.id);
      const Se3Pose est = rig_camera_pose(drift[k].apply(truth[k]), rig, rc.id);
      Keyframe kf;
      kf.seq = seq;
      kf.camera_id = rc.id;
      kf.timestamp = k * traj.step_dt;
      kf.camera = rc.intrinsics;
      kf.camera.pose = est;
      const std::string name = detail::frame_name(seq, rc.id);
      kf.image_file = "rgb/" + name + ".png";
      kf.depth_file = "depth/" + name + ".png";
      PinholeCamera truth_cam = rc.intrinsics;
      truth_cam.pose = gt;
      const auto frame = rt.render(truth_cam);
      kf.image = frame.color;
      kf.depth = frame.depth;
      if (traj.embeddings) {
        kf.embeddings_file = "emb/" + name + ".legsemb";
        EmbeddingFile ef;
        ef.dim = planted.dim;
        const int cols = std::max(1, truth_cam.width / traj.embedding_downsample);
        const int rows = std::max(1, truth_cam.height / traj.embedding_downsample);
        for (double s : scales) ef.records.push_back(embedding_targets(frame, truth_cam, planted, s, rows, cols));
        fs::create_directories(out / "emb");
        write_embeddings((out / kf.embeddings_file).string(), ef);
      }
      fs::create_directories(out / "rgb");
      fs::create_directories(out / "depth");
      write_png((out / kf.image_file).string(), kf.image);
      write_depth_png((out / kf.depth_file).string(), kf.depth);
      kf.image = Image();
      kf.depth = Image();
      history.emplace_back(seq, gt);
      true_poses.push_back({{"seq", seq}, {"camera", rc.id}, {"pose", pose_to_json(gt)}});
      records.push_back(std::move(kf));
      ++stats.keyframes;
      ++seq;
    }
    if (traj.ba_every > 0 && (k + 1) % traj.ba_every == 0) {
      PoseUpdateEvent ev;
      ev.trigger_seq = seq - 1;
      for (const auto& [s, pose] : history) ev.corrections.push_back({s, pose});
      records.push_back(ev);
      ++stats.events;
    }
  }
  write_manifest(out / kManifestName, records);

  // Held-out views: a separate ring at a different radius and height, true poses.
  std::vector<StreamRecord> heldout;
  const RigCamera& primary = rig.camera(rig.primary);
  for (int h = 0; h < traj.heldout_views; ++h) {
    const double a = 2 * M_PI * (h + 0.25) / std::max(1, traj.heldout_views);
    const Eigen::Vector3d p = traj.center + Eigen::Vector3d(traj.heldout_radius * std::cos(a),
                                                            traj.heldout_radius * std::sin(a),
                                                            traj.heldout_height - traj.center.z());
    Keyframe kf;
    kf.seq = static_cast<std::uint64_t>(h);
    kf.camera_id = primary.id;
    kf.camera = primary.intrinsics;
    kf.camera.pose = look_at(p, traj.look_at);
    const std::string name = detail::frame_name(kf.seq, "heldout");
    kf.image_file = "heldout/" + name + ".png";
    kf.depth_file = "heldout/" + name + "_depth.png";
    const auto frame = rt.render(kf.camera);
    kf.image = frame.color;
    kf.depth = frame.depth;
    heldout.push_back(std::move(kf));
    ++stats.heldout;
  }
  write_stream(out, heldout, kHeldoutName);

  // Queries (record 0: one row per object) and negatives (record 1).
  EmbeddingFile q;
  q.dim = planted.dim;
  std::vector<float> rows, negs;
  for (const auto& e : planted.objects)
    for (int k = 0; k < planted.dim; ++k) rows.push_back(static_cast<float>(e[k]));
  for (const auto& e : planted.negatives)
    for (int k = 0; k < planted.dim; ++k) negs.push_back(static_cast<float>(e[k]));
  q.records.push_back(EmbeddingRecord::flat(rows, planted.dim));
  q.records.push_back(EmbeddingRecord::flat(negs, planted.dim));
  write_embeddings((out / "queries.legsemb").string(), q);
  EmbeddingFile n;
  n.dim = planted.dim;
  n.records.push_back(EmbeddingRecord::flat(negs, planted.dim));
  write_embeddings((out / "negatives.legsemb").string(), n);

  const auto ann = annotation_views(rt, primary.intrinsics, traj);
  {
    std::ofstream os(out / "annotations.json");
    os << annotations_to_json(ann).dump(1) << '\n';
  }

  Json objects = Json::array();
  for (const auto& o : scene.objects) {
    const auto [lo, hi] = SceneSpec::aabb_of(o);
    objects.push_back({{"name", o.name},
                       {"primitive", o.primitive == Primitive::box ? "box" : "sphere"},
                       {"aabb_min", detail::vec_json(lo)},
                       {"aabb_max", detail::vec_json(hi)}});
  }
  Json gt{{"room_min", detail::vec_json(scene.room_min)},
          {"room_max", detail::vec_json(scene.room_max)},
          {"objects", objects},
          {"true_poses", true_poses},
          {"embedding_dim", planted.dim},
          {"keyframes", stats.keyframes},
          {"ba_events", stats.events}};
  std::ofstream os(out / "gt.json");
  os << gt.dump(1) << '\n';
  return stats;
}

}  // namespace legs::sim
