#pragma once

// Test-only reference implementations. They deliberately avoid the library's
// projection, tiling and sorting code so that they can serve as oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "legs/geom.hpp"

namespace legs::oracle {

struct BruteSplat {
  double u, v, z, a, b, c, opacity;
  std::size_t index;
};

/// Per-pixel compositor: every pixel scans every Gaussian, no tiles, no
/// shared projection code.
inline Image brute_force_render(const GaussianCloud<float>& scene, const PinholeCamera& cam,
                                const std::vector<double>& background) {
  const Eigen::Matrix3d w = cam.pose.rotation_matrix().transpose();
  std::vector<BruteSplat> splats;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const Eigen::Vector3d mu = scene.mean(i).cast<double>();
    const Eigen::Vector3d t = w * (mu - cam.pose.translation);
    if (t.z() <= kSplatNearPlane) continue;
    const Eigen::Vector4d q = scene.rotation(i).cast<double>().normalized();
    const Eigen::Matrix3d r =
        Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
    const Eigen::Vector3d s = scene.log_scale(i).cast<double>().array().exp();
    const Eigen::Matrix3d sigma = r * (s.array() * s.array()).matrix().asDiagonal() * r.transpose();
    Eigen::Matrix<double, 2, 3> j;
    const double gx = kFrustumGuard * cam.width / (2 * cam.fx), gy = kFrustumGuard * cam.height / (2 * cam.fy);
    const double rx = std::max(-gx, std::min(gx, t.x() / t.z())), ry = std::max(-gy, std::min(gy, t.y() / t.z()));
    j << cam.fx / t.z(), 0, -cam.fx * rx / t.z(), 0, cam.fy / t.z(), -cam.fy * ry / t.z();
    Eigen::Matrix2d cov = j * w * sigma * w.transpose() * j.transpose();
    cov += 0.3 * Eigen::Matrix2d::Identity();
    const Eigen::Matrix2d inv = cov.inverse();
    const double o = 1.0 / (1.0 + std::exp(-static_cast<double>(scene.opacity_logits[i])));
    splats.push_back({cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy, t.z(),
                      inv(0, 0), inv(0, 1), inv(1, 1), o, i});
  }
  std::stable_sort(splats.begin(), splats.end(),
                   [](const BruteSplat& x, const BruteSplat& y) { return x.z < y.z; });

  Image img(cam.width, cam.height, 3);
  for (int py = 0; py < cam.height; ++py)
    for (int px = 0; px < cam.width; ++px) {
      double tr = 1.0, acc[3] = {0, 0, 0};
      for (const auto& s : splats) {
        const double dx = px - s.u, dy = py - s.v;
        const double power = -0.5 * (s.a * dx * dx + s.c * dy * dy) - s.b * dx * dy;
        const double alpha = std::min(0.99, s.opacity * std::exp(power));
        if (alpha < 1.0 / 255.0) continue;
        if (tr * (1 - alpha) < 1e-4) break;
        for (int c = 0; c < 3; ++c) acc[c] += alpha * tr * scene.colors[3 * s.index + c];
        tr *= 1 - alpha;
      }
      for (int c = 0; c < 3; ++c) img.at(px, py, c) = static_cast<float>(acc[c] + tr * background[c]);
    }
  return img;
}

/// Random scene in front of an identity camera looking down +z.
inline GaussianCloud<float> random_scene(std::mt19937_64& rng, int count, double depth_lo = 1.0,
                                         double depth_hi = 5.0, double spread = 1.5) {
  std::uniform_real_distribution<double> u(-1, 1), z(depth_lo, depth_hi), ls(-3.5, -1.2),
      op(-2.0, 3.0), col(0, 1);
  std::normal_distribution<double> n(0, 1);
  GaussianCloud<float> cloud;
  for (int i = 0; i < count; ++i) {
    Gaussian<float> g;
    const double d = z(rng);
    g.mean = Vec3<float>(spread * u(rng) * d / 2, spread * u(rng) * d / 2, d);
    g.log_scale = Vec3<float>(ls(rng), ls(rng), ls(rng));
    g.rotation = Vec4<float>(n(rng), n(rng), n(rng), n(rng)).normalized();
    g.opacity_logit = static_cast<float>(op(rng));
    g.color = Vec3<float>(col(rng), col(rng), col(rng));
    cloud.push_back(g);
  }
  return cloud;
}

/// Central finite difference of f with respect to x[i].
inline double central_difference(const std::function<double()>& f, double& x, double step) {
  const double saved = x;
  x = saved + step;
  const double fp = f();
  x = saved - step;
  const double fm = f();
  x = saved;
  return (fp - fm) / (2 * step);
}

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), floor});
}

}  // namespace legs::oracle
