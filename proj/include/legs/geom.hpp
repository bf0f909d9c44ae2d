#pragma once

// Geometry and image primitives: rigid transforms, pinhole cameras, the
// Gaussian primitive and image metrics.
//
// Conventions used throughout the library:
//   * quaternions are written (w, x, y, z) in every file format;
//   * poses are camera-to-world;
//   * camera frame is +z forward, +x right, +y down;
//   * pixel centers sit at integer coordinates, so u = cx is the optical axis.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "legs/errors.hpp"

namespace legs {

inline constexpr double kNearPlane = 0.01;
// Splats closer than this are culled; nearer ones have unstable footprints.
inline constexpr double kSplatNearPlane = 0.2;
// The EWA Jacobian is evaluated with x/z, y/z clamped to this multiple of the
// half field of view, so splats far outside the frustum stay bounded.
inline constexpr double kFrustumGuard = 1.3;

template <typename T>
using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T>
using Vec4 = Eigen::Matrix<T, 4, 1>;
template <typename T>
using Mat2 = Eigen::Matrix<T, 2, 2>;
template <typename T>
using Mat3 = Eigen::Matrix<T, 3, 3>;

// ---------------------------------------------------------------------------
// Se3Pose
// ---------------------------------------------------------------------------

struct Se3Pose {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();

  Se3Pose() = default;
  Se3Pose(const Eigen::Vector3d& t, const Eigen::Quaterniond& q)
      : translation(t), rotation(q.normalized()) {}

  static Se3Pose identity() { return {}; }

  static Se3Pose from_wxyz(const std::array<double, 3>& t, const std::array<double, 4>& q) {
    return {Eigen::Vector3d(t[0], t[1], t[2]), Eigen::Quaterniond(q[0], q[1], q[2], q[3])};
  }

  std::array<double, 4> wxyz() const {
    return {rotation.w(), rotation.x(), rotation.y(), rotation.z()};
  }

  Eigen::Matrix3d rotation_matrix() const { return rotation.toRotationMatrix(); }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation_matrix();
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  bool operator==(const Se3Pose& o) const {
    return translation == o.translation && rotation.coeffs() == o.rotation.coeffs();
  }
};

inline Se3Pose se3_compose(const Se3Pose& a, const Se3Pose& b) {
  return {a.translation + a.rotation * b.translation, a.rotation * b.rotation};
}

inline Se3Pose se3_inverse(const Se3Pose& a) {
  const Eigen::Quaterniond qi = a.rotation.conjugate();
  return {-(qi * a.translation), qi};
}

inline Eigen::Vector3d se3_apply(const Se3Pose& a, const Eigen::Vector3d& p) {
  return a.rotation * p + a.translation;
}

// Rotation angle (radians) and translation distance between two poses.
inline double rotation_distance(const Se3Pose& a, const Se3Pose& b) {
  return a.rotation.angularDistance(b.rotation);
}
inline double translation_distance(const Se3Pose& a, const Se3Pose& b) {
  return (a.translation - b.translation).norm();
}

// ---------------------------------------------------------------------------
// PinholeCamera
// ---------------------------------------------------------------------------

struct PinholeCamera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 1, height = 1;
  Se3Pose pose;  // camera-to-world

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ConfigError("camera dimensions must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
      throw ConfigError("camera principal point must lie inside the image");
  }

  /// Same camera at a different image size. Pixel centers stay at integer
  /// coordinates, so the principal point is mapped as (c + 0.5) * k - 0.5.
  PinholeCamera resized(int new_width, int new_height) const {
    PinholeCamera c = *this;
    const double kx = static_cast<double>(new_width) / width;
    const double ky = static_cast<double>(new_height) / height;
    c.fx = fx * kx;
    c.fy = fy * ky;
    c.cx = (cx + 0.5) * kx - 0.5;
    c.cy = (cy + 0.5) * ky - 0.5;
    c.width = new_width;
    c.height = new_height;
    return c;
  }

  Eigen::Matrix3d world_to_camera_rotation() const { return pose.rotation_matrix().transpose(); }
};

struct ProjectedPoint {
  double u = 0.0, v = 0.0, z_cam = 0.0;
  bool in_front = false;  // false when z_cam <= near plane

  bool inside(const PinholeCamera& cam) const {
    return in_front && u >= -0.5 && v >= -0.5 && u < cam.width - 0.5 && v < cam.height - 0.5;
  }
};

inline ProjectedPoint project_point(const Eigen::Vector3d& p, const PinholeCamera& cam) {
  const Eigen::Vector3d pc = se3_apply(se3_inverse(cam.pose), p);
  ProjectedPoint out;
  out.z_cam = pc.z();
  out.in_front = pc.z() > kNearPlane;
  if (out.in_front) {
    out.u = cam.fx * pc.x() / pc.z() + cam.cx;
    out.v = cam.fy * pc.y() / pc.z() + cam.cy;
  }
  return out;
}

/// World point seen at pixel (u, v) with metric depth z. Returns nullopt for
/// an invalid depth reading (non-positive or non-finite).
inline std::optional<Eigen::Vector3d> deproject_pixel(double u, double v, double depth,
                                                      const PinholeCamera& cam) {
  if (!std::isfinite(depth) || depth <= 0.0) return std::nullopt;
  const Eigen::Vector3d pc((u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth);
  return se3_apply(cam.pose, pc);
}

// ---------------------------------------------------------------------------
// Gaussian primitive
// ---------------------------------------------------------------------------

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Rotation matrix of the normalized quaternion q = (w, x, y, z).
template <typename T>
Mat3<T> quat_to_matrix(const Vec4<T>& q_raw) {
  const Vec4<T> q = q_raw / q_raw.norm();
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3<T> r;
  r << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
      T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
      T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
  return r;
}

/// Inverse of quat_to_matrix, w >= 0 branch.
template <typename T>
Vec4<T> matrix_to_quat(const Mat3<T>& r) {
  Eigen::Quaternion<T> q(r);
  Vec4<T> out(q.w(), q.x(), q.y(), q.z());
  if (out[0] < T(0)) out = -out;
  return out / out.norm();
}

template <typename T>
struct GaussianParams {
  Vec3<T> mean = Vec3<T>::Zero();
  Vec3<T> log_scale = Vec3<T>::Zero();
  Vec4<T> rotation = Vec4<T>(T(1), T(0), T(0), T(0));  // (w, x, y, z)
  T opacity_logit = T(0);
  Vec3<T> color = Vec3<T>::Zero();
};

template <typename T>
struct Gaussian : GaussianParams<T> {
  std::uint64_t anchor_keyframe = 0;

  T opacity() const { return sigmoid(this->opacity_logit); }
};

/// Sigma = R diag(exp(2 log_scale)) R^T; symmetric positive definite.
template <typename T>
Mat3<T> covariance_of(const GaussianParams<T>& g) {
  const Mat3<T> r = quat_to_matrix<T>(g.rotation);
  const Vec3<T> s = g.log_scale.array().exp().matrix();
  const Mat3<T> m = r * s.asDiagonal();
  return m * m.transpose();
}

enum class ParamGroup : int { mean = 0, log_scale, rotation, opacity, color };
inline constexpr int kParamGroupCount = 5;
inline constexpr std::array<int, kParamGroupCount> kParamGroupWidth = {3, 3, 4, 1, 3};

/// Struct-of-arrays storage for a set of Gaussians. Also used for their
/// gradients (anchors left empty in that case).
template <typename T>
struct GaussianCloud {
  std::vector<T> means, log_scales, rotations, opacity_logits, colors;
  std::vector<std::uint64_t> anchors;

  std::size_t size() const { return opacity_logits.size(); }
  bool empty() const { return size() == 0; }

  std::vector<T>& group(ParamGroup g) {
    switch (g) {
      case ParamGroup::mean: return means;
      case ParamGroup::log_scale: return log_scales;
      case ParamGroup::rotation: return rotations;
      case ParamGroup::opacity: return opacity_logits;
      case ParamGroup::color: return colors;
    }
    return means;
  }
  const std::vector<T>& group(ParamGroup g) const {
    return const_cast<GaussianCloud&>(*this).group(g);
  }

  Eigen::Map<Vec3<T>> mean(std::size_t i) { return Eigen::Map<Vec3<T>>(&means[3 * i]); }
  Eigen::Map<const Vec3<T>> mean(std::size_t i) const {
    return Eigen::Map<const Vec3<T>>(&means[3 * i]);
  }
  Eigen::Map<Vec3<T>> log_scale(std::size_t i) { return Eigen::Map<Vec3<T>>(&log_scales[3 * i]); }
  Eigen::Map<const Vec3<T>> log_scale(std::size_t i) const {
    return Eigen::Map<const Vec3<T>>(&log_scales[3 * i]);
  }
  Eigen::Map<Vec4<T>> rotation(std::size_t i) { return Eigen::Map<Vec4<T>>(&rotations[4 * i]); }
  Eigen::Map<const Vec4<T>> rotation(std::size_t i) const {
    return Eigen::Map<const Vec4<T>>(&rotations[4 * i]);
  }
  Eigen::Map<Vec3<T>> color(std::size_t i) { return Eigen::Map<Vec3<T>>(&colors[3 * i]); }
  Eigen::Map<const Vec3<T>> color(std::size_t i) const {
    return Eigen::Map<const Vec3<T>>(&colors[3 * i]);
  }

  /// Zero-filled cloud with n entries (gradient buffers).
  static GaussianCloud zeros(std::size_t n, bool with_anchors = false) {
    GaussianCloud c;
    c.means.assign(3 * n, T(0));
    c.log_scales.assign(3 * n, T(0));
    c.rotations.assign(4 * n, T(0));
    c.opacity_logits.assign(n, T(0));
    c.colors.assign(3 * n, T(0));
    if (with_anchors) c.anchors.assign(n, 0);
    return c;
  }

  void push_back(const Gaussian<T>& g) {
    means.insert(means.end(), g.mean.data(), g.mean.data() + 3);
    log_scales.insert(log_scales.end(), g.log_scale.data(), g.log_scale.data() + 3);
    rotations.insert(rotations.end(), g.rotation.data(), g.rotation.data() + 4);
    opacity_logits.push_back(g.opacity_logit);
    colors.insert(colors.end(), g.color.data(), g.color.data() + 3);
    anchors.push_back(g.anchor_keyframe);
  }

  Gaussian<T> get(std::size_t i) const {
    Gaussian<T> g;
    g.mean = mean(i);
    g.log_scale = log_scale(i);
    g.rotation = rotation(i);
    g.opacity_logit = opacity_logits[i];
    g.color = color(i);
    g.anchor_keyframe = anchors.empty() ? 0 : anchors[i];
    return g;
  }

  void set(std::size_t i, const Gaussian<T>& g) {
    mean(i) = g.mean;
    log_scale(i) = g.log_scale;
    rotation(i) = g.rotation;
    opacity_logits[i] = g.opacity_logit;
    color(i) = g.color;
    if (!anchors.empty()) anchors[i] = g.anchor_keyframe;
  }

  /// Keep only the entries whose index is listed (in the listed order).
  GaussianCloud select(const std::vector<std::uint32_t>& idx) const {
    GaussianCloud out;
    for (int gi = 0; gi < kParamGroupCount; ++gi) {
      const auto g = static_cast<ParamGroup>(gi);
      const int w = kParamGroupWidth[gi];
      const auto& src = group(g);
      auto& dst = out.group(g);
      dst.resize(idx.size() * w);
      for (std::size_t k = 0; k < idx.size(); ++k)
        for (int j = 0; j < w; ++j) dst[k * w + j] = src[idx[k] * w + j];
    }
    if (!anchors.empty()) {
      out.anchors.resize(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) out.anchors[k] = anchors[idx[k]];
    }
    return out;
  }

  template <typename U>
  GaussianCloud<U> cast() const {
    GaussianCloud<U> out;
    for (int gi = 0; gi < kParamGroupCount; ++gi) {
      const auto g = static_cast<ParamGroup>(gi);
      const auto& src = group(g);
      out.group(g).assign(src.begin(), src.end());
    }
    out.anchors = anchors;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Images and metrics
// ---------------------------------------------------------------------------

template <typename T>
struct ImageT {
  int width = 0, height = 0, channels = 0;
  std::vector<T> data;

  ImageT() = default;
  ImageT(int w, int h, int c, T fill = T(0))
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  T& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  const T& at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  T* pixel(int x, int y) { return &data[(static_cast<std::size_t>(y) * width + x) * channels]; }
  const T* pixel(int x, int y) const {
    return &data[(static_cast<std::size_t>(y) * width + x) * channels];
  }
  bool same_shape(const ImageT& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  template <typename U>
  ImageT<U> cast() const {
    ImageT<U> out;
    out.width = width;
    out.height = height;
    out.channels = channels;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

using Image = ImageT<float>;

inline double mean_squared_error(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw DataError("image dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    acc += d * d;
  }
  return a.data.empty() ? 0.0 : acc / static_cast<double>(a.data.size());
}

/// PSNR in dB for [0, 1] data, capped at 100 dB for MSE < 1e-10.
inline double psnr(const Image& a, const Image& b) {
  const double mse = mean_squared_error(a, b);
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace legs
