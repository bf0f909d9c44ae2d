#pragma once

// Tile-based differentiable Gaussian rasterizer.
//
// Forward: every Gaussian is projected to a 2D splat (EWA, dilated by 0.3 px^2),
// binned into 16x16 tiles by the bounding box of the region where it can
// reach alpha >= 1/255, and each tile composites its splats front-to-back
// (depth, then Gaussian index). The backward pass walks the same lists
// back-to-front and chains the blend gradients down to every parameter.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "legs/geom.hpp"

namespace legs {

inline constexpr int kTileSize = 16;
inline constexpr double kLowPassDilation = 0.3;
inline constexpr double kMaxSplatAlpha = 0.99;
inline constexpr double kMinSplatAlpha = 1.0 / 255.0;
inline constexpr double kMinTransmittance = 1e-4;

enum class RenderMode { color, feature, depth };

template <typename T>
struct Splat2D {
  Vec2<T> mean2d = Vec2<T>::Zero();
  Mat2<T> cov2d = Mat2<T>::Identity();
  T z_cam = T(0);
  std::uint32_t parent = 0;

  Vec3<T> conic = Vec3<T>::Zero();  // (a, b, c) of cov2d^-1
  T opacity = T(0);
  Vec3<T> t_cam = Vec3<T>::Zero();
  // Inclusive pixel bounds of the alpha >= 1/255 support, clipped to the image.
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;
};

namespace detail {

template <typename T>
struct GuardedRatios {
  T ux{}, uy{};                       // clamped x/z, y/z
  bool x_free = true, y_free = true;  // false when the clamp is active
};

template <typename T>
T guarded_ratio(T num, T z, double fov_tan, bool& free) {
  const T lim = T(kFrustumGuard * fov_tan);
  const T r = num / z;
  free = r > -lim && r < lim;
  return std::clamp(r, -lim, lim);
}

template <typename T>
Eigen::Matrix<T, 2, 3> perspective_jacobian(const Vec3<T>& t, const PinholeCamera& cam,
                                            GuardedRatios<T>* ratios = nullptr) {
  const T fx = T(cam.fx), fy = T(cam.fy);
  const T iz = T(1) / t.z();
  GuardedRatios<T> g;
  g.ux = guarded_ratio(t.x(), t.z(), 0.5 * cam.width / cam.fx, g.x_free);
  g.uy = guarded_ratio(t.y(), t.z(), 0.5 * cam.height / cam.fy, g.y_free);
  if (ratios) *ratios = g;
  Eigen::Matrix<T, 2, 3> j;
  j << fx * iz, T(0), -fx * g.ux * iz, T(0), fy * iz, -fy * g.uy * iz;
  return j;
}

template <typename T>
Mat3<T> camera_rotation(const PinholeCamera& cam) {
  return cam.world_to_camera_rotation().cast<T>();
}

}  // namespace detail

/// Projects one Gaussian. Returns nullopt when it is behind the near plane,
/// can never reach alpha 1/255, or its support misses the image.
template <typename T>
std::optional<Splat2D<T>> project_gaussian(const GaussianParams<T>& g, const PinholeCamera& cam,
                                           std::uint32_t parent = 0) {
  const Mat3<T> w = detail::camera_rotation<T>(cam);
  const Vec3<T> c = cam.pose.translation.cast<T>();
  const Vec3<T> t = w * (g.mean - c);
  if (!(t.z() > T(kSplatNearPlane))) return std::nullopt;

  const T opacity = sigmoid(g.opacity_logit);
  if (!(opacity * T(255) > T(1))) return std::nullopt;

  const Eigen::Matrix<T, 2, 3> jw = detail::perspective_jacobian<T>(t, cam) * w;
  Mat2<T> cov2d = jw * covariance_of(g) * jw.transpose();
  cov2d(0, 0) += T(kLowPassDilation);
  cov2d(1, 1) += T(kLowPassDilation);
  const T det = cov2d.determinant();
  if (!(det > T(0))) return std::nullopt;

  Splat2D<T> s;
  s.parent = parent;
  s.t_cam = t;
  s.z_cam = t.z();
  s.opacity = opacity;
  s.cov2d = cov2d;
  s.conic = Vec3<T>(cov2d(1, 1) / det, -cov2d(0, 1) / det, cov2d(0, 0) / det);
  s.mean2d = Vec2<T>(T(cam.fx) * t.x() / t.z() + T(cam.cx), T(cam.fy) * t.y() / t.z() + T(cam.cy));

  // alpha >= 1/255 requires d^T cov^-1 d <= 2 ln(255 o); the bounding box of
  // that ellipse has half-widths sqrt(k * cov_xx), sqrt(k * cov_yy).
  const double k = 2.0 * std::log(255.0 * static_cast<double>(opacity));
  const double hx = std::sqrt(k * static_cast<double>(cov2d(0, 0)));
  const double hy = std::sqrt(k * static_cast<double>(cov2d(1, 1)));
  const double mx = static_cast<double>(s.mean2d.x()), my = static_cast<double>(s.mean2d.y());
  if (!std::isfinite(mx) || !std::isfinite(my) || !std::isfinite(hx) || !std::isfinite(hy))
    return std::nullopt;
  const double lo_x = std::max(0.0, std::ceil(mx - hx) - 1.0);
  const double hi_x = std::min(cam.width - 1.0, std::floor(mx + hx) + 1.0);
  const double lo_y = std::max(0.0, std::ceil(my - hy) - 1.0);
  const double hi_y = std::min(cam.height - 1.0, std::floor(my + hy) + 1.0);
  if (lo_x > hi_x || lo_y > hi_y) return std::nullopt;
  s.x0 = static_cast<int>(lo_x);
  s.x1 = static_cast<int>(hi_x);
  s.y0 = static_cast<int>(lo_y);
  s.y1 = static_cast<int>(hi_y);
  return s;
}

/// Per-Gaussian value rows (N x dim, row-major) for feature renders.
template <typename T>
struct FeatureRows {
  std::span<const T> data;
  int dim = 0;
};

template <typename T>
struct RenderOutput {
  ImageT<T> image;
  std::vector<T> final_transmittance;
  std::vector<std::uint32_t> contributor_count;

  // Saved for the backward pass.
  RenderMode mode = RenderMode::color;
  PinholeCamera camera;
  std::vector<T> background;
  std::vector<Splat2D<T>> splats;
  std::vector<std::int32_t> splat_of_gaussian;  // -1 when culled
  std::vector<std::uint32_t> tile_entries;      // splat indices, tile-major
  std::vector<std::uint32_t> tile_offsets;      // tiles + 1
  std::vector<std::uint32_t> last_entry;        // per pixel, one past the last contributor
  int tiles_x = 0, tiles_y = 0;

  int channels() const { return image.channels; }
};

template <typename T>
struct RenderGradients {
  GaussianCloud<T> params;          // d loss / d parameter, same layout as the scene
  std::vector<T> features;          // N x dim in feature mode
  std::vector<T> mean2d_grad_norm;  // |d loss / d mean2d| in pixels
  std::vector<std::uint8_t> visible;
};

namespace detail {

template <typename T>
int render_channels(RenderMode mode, const FeatureRows<T>& features) {
  switch (mode) {
    case RenderMode::color: return 3;
    case RenderMode::feature: return features.dim;
    case RenderMode::depth: return 1;
  }
  return 0;
}

template <typename T>
const T* splat_value(RenderMode mode, const GaussianCloud<T>& scene, const FeatureRows<T>& features,
                     const Splat2D<T>& s) {
  switch (mode) {
    case RenderMode::color: return &scene.colors[3 * s.parent];
    case RenderMode::feature:
      return features.data.data() + static_cast<std::size_t>(s.parent) * features.dim;
    case RenderMode::depth: return &s.z_cam;
  }
  return nullptr;
}

// Exponents below this give alpha < 1/255 with margin to spare, so exp() can
// be skipped without changing which splats pass the alpha test. Outside a
// splat's pixel box the same holds by construction.
template <typename T>
T power_cutoff(T opacity) {
  return std::log(T(kMinSplatAlpha) / opacity) - T(0.01);
}

template <typename T>
void bin_splats(RenderOutput<T>& out) {
  const int tx = out.tiles_x, ty = out.tiles_y;
  const auto& splats = out.splats;
  // Splats are in Gaussian-index order, so a stable sort on depth breaks ties
  // by index; filling tiles in that order keeps every tile list sorted.
  std::vector<std::uint32_t> order(splats.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return splats[a].z_cam < splats[b].z_cam; });
  std::vector<std::uint32_t> counts(static_cast<std::size_t>(tx) * ty + 1, 0);
  for (const auto& s : splats)
    for (int y = s.y0 / kTileSize; y <= s.y1 / kTileSize; ++y)
      for (int x = s.x0 / kTileSize; x <= s.x1 / kTileSize; ++x) ++counts[y * tx + x + 1];
  std::partial_sum(counts.begin(), counts.end(), counts.begin());
  out.tile_offsets = counts;
  out.tile_entries.assign(counts.back(), 0);
  std::vector<std::uint32_t> cursor(counts.begin(), counts.end() - 1);
  for (const std::uint32_t si : order) {
    const auto& s = splats[si];
    for (int y = s.y0 / kTileSize; y <= s.y1 / kTileSize; ++y)
      for (int x = s.x0 / kTileSize; x <= s.x1 / kTileSize; ++x) out.tile_entries[cursor[y * tx + x]++] = si;
  }
}

}  // namespace detail

/// Forward render. `used`, when given, is resized to the scene size and marks
/// every Gaussian that contributes to (or terminates) at least one pixel.
template <typename T>
RenderOutput<T> render(const GaussianCloud<T>& scene, const PinholeCamera& cam, RenderMode mode,
                       std::span<const T> background = {}, FeatureRows<T> features = {},
                       std::vector<std::uint8_t>* used = nullptr) {
  const int channels = detail::render_channels(mode, features);
  if (mode == RenderMode::feature &&
      features.data.size() != scene.size() * static_cast<std::size_t>(features.dim))
    throw DataError("feature render needs one feature row per Gaussian");

  RenderOutput<T> out;
  out.mode = mode;
  out.camera = cam;
  out.background.assign(channels, T(0));
  for (int c = 0; c < channels && c < static_cast<int>(background.size()); ++c)
    out.background[c] = background[c];
  out.image = ImageT<T>(cam.width, cam.height, channels);
  out.final_transmittance.assign(out.image.pixel_count(), T(1));
  out.contributor_count.assign(out.image.pixel_count(), 0);
  out.last_entry.assign(out.image.pixel_count(), 0);
  out.tiles_x = (cam.width + kTileSize - 1) / kTileSize;
  out.tiles_y = (cam.height + kTileSize - 1) / kTileSize;

  const std::size_t n = scene.size();
  out.splat_of_gaussian.assign(n, -1);
  {
    std::vector<std::optional<Splat2D<T>>> projected(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) {
      GaussianParams<T> g;
      g.mean = scene.mean(i);
      g.log_scale = scene.log_scale(i);
      g.rotation = scene.rotation(i);
      g.opacity_logit = scene.opacity_logits[i];
      projected[i] = project_gaussian<T>(g, cam, static_cast<std::uint32_t>(i));
    }
    for (std::size_t i = 0; i < n; ++i)
      if (projected[i]) {
        out.splat_of_gaussian[i] = static_cast<std::int32_t>(out.splats.size());
        out.splats.push_back(*projected[i]);
      }
  }
  detail::bin_splats(out);

  std::vector<std::uint8_t> used_local;
  if (used) used_local.assign(out.tile_entries.size(), 0);

  const T min_alpha = T(kMinSplatAlpha), max_alpha = T(kMaxSplatAlpha);
  const T min_t = T(kMinTransmittance);
  const int tile_count = out.tiles_x * out.tiles_y;

  // Splat-major within a tile: every splat visits only the pixels of its box.
  // Each pixel still sees the splats in depth order with the same arithmetic
  // as a per-pixel loop.
#pragma omp parallel for schedule(dynamic, 1)
  for (int tile = 0; tile < tile_count; ++tile) {
    const int tx0 = (tile % out.tiles_x) * kTileSize, ty0 = (tile / out.tiles_x) * kTileSize;
    const int tx1 = std::min(tx0 + kTileSize, cam.width) - 1, ty1 = std::min(ty0 + kTileSize, cam.height) - 1;
    const std::uint32_t begin = out.tile_offsets[tile], end = out.tile_offsets[tile + 1];
    constexpr int kPixels = kTileSize * kTileSize;
    std::array<T, kPixels> transmittance;
    transmittance.fill(T(1));
    std::array<std::uint32_t, kPixels> last{}, contributors{};
    std::array<bool, kPixels> done{};
    std::vector<T> acc(static_cast<std::size_t>(kPixels) * channels, T(0));
    int live = (tx1 - tx0 + 1) * (ty1 - ty0 + 1);
    for (std::uint32_t k = 0; k < end - begin && live > 0; ++k) {
      const auto& s = out.splats[out.tile_entries[begin + k]];
      const T mx = s.mean2d.x(), my = s.mean2d.y();
      const T ca = s.conic.x(), cb = s.conic.y(), cc = s.conic.z(), op = s.opacity;
      const T cutoff = detail::power_cutoff(op);
      const T* v = detail::splat_value(mode, scene, features, s);
      const int x0 = std::max(s.x0, tx0), x1 = std::min(s.x1, tx1);
      const int y0 = std::max(s.y0, ty0), y1 = std::min(s.y1, ty1);
      for (int py = y0; py <= y1; ++py) {
        const T dy = T(py) - my;
        for (int px = x0; px <= x1; ++px) {
          const int q = (py - ty0) * kTileSize + (px - tx0);
          if (done[q]) continue;
          const T dx = T(px) - mx;
          const T power = T(-0.5) * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
          if (power < cutoff) continue;
          const T alpha = std::min(max_alpha, op * std::exp(power));
          if (alpha < min_alpha) continue;
          const T next_t = transmittance[q] * (T(1) - alpha);
          if (used) used_local[begin + k] = 1;
          if (next_t < min_t) {
            done[q] = true;
            --live;
            continue;
          }
          const T w = alpha * transmittance[q];
          T* a = &acc[static_cast<std::size_t>(q) * channels];
          for (int c = 0; c < channels; ++c) a[c] += w * v[c];
          transmittance[q] = next_t;
          last[q] = k + 1;
          ++contributors[q];
        }
      }
    }
    for (int py = ty0; py <= ty1; ++py)
      for (int px = tx0; px <= tx1; ++px) {
        const int q = (py - ty0) * kTileSize + (px - tx0);
        const std::size_t pix = static_cast<std::size_t>(py) * cam.width + px;
        const T* a = &acc[static_cast<std::size_t>(q) * channels];
        T* dst = out.image.pixel(px, py);
        for (int c = 0; c < channels; ++c) dst[c] = a[c] + transmittance[q] * out.background[c];
        out.final_transmittance[pix] = transmittance[q];
        out.contributor_count[pix] = contributors[q];
        out.last_entry[pix] = last[q];
      }
  }

  if (used) {
    used->assign(n, 0);
    for (std::size_t e = 0; e < out.tile_entries.size(); ++e)
      if (used_local[e]) (*used)[out.splats[out.tile_entries[e]].parent] = 1;
  }
  return out;
}

/// Analytic gradient of sum(grad_image * render(scene)) with respect to every
/// Gaussian parameter and (feature mode) every feature row.
template <typename T>
RenderGradients<T> render_backward(const GaussianCloud<T>& scene, const RenderOutput<T>& fwd,
                                   const ImageT<T>& grad_image, FeatureRows<T> features = {}) {
  const int channels = fwd.channels();
  const PinholeCamera& cam = fwd.camera;
  if (grad_image.width != cam.width || grad_image.height != cam.height ||
      grad_image.channels != channels)
    throw DataError("gradient image does not match the forward render");

  const std::size_t n = scene.size();
  RenderGradients<T> out;
  out.params = GaussianCloud<T>::zeros(n);
  if (fwd.mode == RenderMode::feature) out.features.assign(n * features.dim, T(0));
  out.mean2d_grad_norm.assign(n, T(0));
  out.visible.assign(n, 0);

  // Per-entry gradient slots: mean2d (2), conic (3), opacity (1), value (C).
  const int stride = 6 + channels;
  std::vector<T> slots(fwd.tile_entries.size() * stride, T(0));

  const T min_alpha = T(kMinSplatAlpha), max_alpha = T(kMaxSplatAlpha);
  const int tile_count = fwd.tiles_x * fwd.tiles_y;

  // Splats are replayed back to front, each over the pixels of its box. Per
  // pixel the order and arithmetic match a per-pixel reverse loop, and each
  // slot accumulates its pixels in raster order.
#pragma omp parallel for schedule(dynamic, 1)
  for (int tile = 0; tile < tile_count; ++tile) {
    const int tx0 = (tile % fwd.tiles_x) * kTileSize, ty0 = (tile / fwd.tiles_x) * kTileSize;
    const int tx1 = std::min(tx0 + kTileSize, cam.width) - 1, ty1 = std::min(ty0 + kTileSize, cam.height) - 1;
    const std::uint32_t begin = fwd.tile_offsets[tile], end = fwd.tile_offsets[tile + 1];
    constexpr int kPixels = kTileSize * kTileSize;
    std::array<T, kPixels> transmittance{}, t_final{}, bg_dot{}, last_alpha{};
    std::array<std::uint32_t, kPixels> last_entry{};
    std::array<const T*, kPixels> upstream{};
    std::vector<T> accum_rec(static_cast<std::size_t>(kPixels) * channels, T(0));
    std::vector<T> last_val(static_cast<std::size_t>(kPixels) * channels, T(0));
    for (int py = ty0; py <= ty1; ++py)
      for (int px = tx0; px <= tx1; ++px) {
        const int q = (py - ty0) * kTileSize + (px - tx0);
        const std::size_t pix = static_cast<std::size_t>(py) * cam.width + px;
        upstream[q] = grad_image.pixel(px, py);
        t_final[q] = transmittance[q] = fwd.final_transmittance[pix];
        last_entry[q] = fwd.last_entry[pix];
        for (int c = 0; c < channels; ++c) bg_dot[q] += fwd.background[c] * upstream[q][c];
      }
    for (std::uint32_t k = end - begin; k-- > 0;) {
      const auto& s = fwd.splats[fwd.tile_entries[begin + k]];
      const T cutoff = detail::power_cutoff(s.opacity);
      const T* v = detail::splat_value(fwd.mode, scene, features, s);
      T* slot = &slots[(begin + k) * stride];
      const int x0 = std::max(s.x0, tx0), x1 = std::min(s.x1, tx1);
      const int y0 = std::max(s.y0, ty0), y1 = std::min(s.y1, ty1);
      for (int py = y0; py <= y1; ++py) {
        const T dy = T(py) - s.mean2d.y();
        for (int px = x0; px <= x1; ++px) {
          const int q = (py - ty0) * kTileSize + (px - tx0);
          if (k >= last_entry[q]) continue;
          const T dx = T(px) - s.mean2d.x();
          const T power =
              T(-0.5) * (s.conic.x() * dx * dx + s.conic.z() * dy * dy) - s.conic.y() * dx * dy;
          if (power < cutoff) continue;
          const T gauss = std::exp(power);
          const T raw_alpha = s.opacity * gauss;
          const T alpha = std::min(max_alpha, raw_alpha);
          if (alpha < min_alpha) continue;
          transmittance[q] = transmittance[q] / (T(1) - alpha);
          const T w = alpha * transmittance[q];
          const T* g = upstream[q];
          T* rec = &accum_rec[static_cast<std::size_t>(q) * channels];
          T* lv = &last_val[static_cast<std::size_t>(q) * channels];
          const T la = last_alpha[q];
          T d_alpha = T(0);
          for (int c = 0; c < channels; ++c) {
            rec[c] = la * lv[c] + (T(1) - la) * rec[c];
            lv[c] = v[c];
            d_alpha += (v[c] - rec[c]) * g[c];
            slot[6 + c] += w * g[c];
          }
          d_alpha *= transmittance[q];
          last_alpha[q] = alpha;
          d_alpha += -t_final[q] / (T(1) - alpha) * bg_dot[q];
          if (raw_alpha > max_alpha) continue;  // clamped: locally constant

          const T d_gauss = s.opacity * d_alpha;
          const T d_power = gauss * d_gauss;
          slot[0] += d_power * (s.conic.x() * dx + s.conic.y() * dy);
          slot[1] += d_power * (s.conic.y() * dx + s.conic.z() * dy);
          slot[2] += d_power * T(-0.5) * dx * dx;
          slot[3] += d_power * -dx * dy;
          slot[4] += d_power * T(-0.5) * dy * dy;
          slot[5] += gauss * d_alpha;
        }
      }
    }
  }

  // Deterministic reduction: tile-major entry order.
  const std::size_t ns = fwd.splats.size();
  std::vector<T> splat_grad(ns * stride, T(0));
  for (std::size_t e = 0; e < fwd.tile_entries.size(); ++e) {
    const T* src = &slots[e * stride];
    T* dst = &splat_grad[fwd.tile_entries[e] * stride];
    for (int j = 0; j < stride; ++j) dst[j] += src[j];
  }

  const Mat3<T> w = detail::camera_rotation<T>(cam);
  const T fx = T(cam.fx), fy = T(cam.fy);

#pragma omp parallel for schedule(static)
  for (std::int64_t si = 0; si < static_cast<std::int64_t>(ns); ++si) {
    const auto& s = fwd.splats[si];
    const std::size_t gi = s.parent;
    const T* sg = &splat_grad[si * stride];
    out.visible[gi] = 1;

    // Values.
    if (fwd.mode == RenderMode::color) {
      for (int c = 0; c < 3; ++c) out.params.colors[3 * gi + c] = sg[6 + c];
    } else if (fwd.mode == RenderMode::feature) {
      for (int c = 0; c < channels; ++c)
        out.features[gi * features.dim + c] = sg[6 + c];
    }

    // Opacity.
    out.params.opacity_logits[gi] = sg[5] * s.opacity * (T(1) - s.opacity);

    // Conic -> 2D covariance.
    const Vec2<T> d_mean2d(sg[0], sg[1]);
    out.mean2d_grad_norm[gi] = d_mean2d.norm();
    Mat2<T> q;
    q << s.conic.x(), s.conic.y(), s.conic.y(), s.conic.z();
    Mat2<T> g_q;
    g_q << sg[2], T(0.5) * sg[3], T(0.5) * sg[3], sg[4];
    const Mat2<T> g_cov2d = -q * g_q * q;

    // 2D covariance -> 3D covariance and camera-frame mean.
    const Vec3<T>& t = s.t_cam;
    detail::GuardedRatios<T> gr;
    const Eigen::Matrix<T, 2, 3> j = detail::perspective_jacobian<T>(t, cam, &gr);
    const Eigen::Matrix<T, 2, 3> jw = j * w;
    GaussianParams<T> gp;
    gp.mean = scene.mean(gi);
    gp.log_scale = scene.log_scale(gi);
    gp.rotation = scene.rotation(gi);
    const Mat3<T> sigma = covariance_of(gp);
    const Mat3<T> g_sigma = jw.transpose() * g_cov2d * jw;
    const Eigen::Matrix<T, 2, 3> g_jw = T(2) * g_cov2d * jw * sigma;
    const Eigen::Matrix<T, 2, 3> g_j = g_jw * w.transpose();

    // J02 = -fx ux / z with ux = clamp(x / z); a clamped ratio is constant.
    const T iz = T(1) / t.z(), iz2 = iz * iz, iz3 = iz2 * iz;
    const T ux = gr.ux, uy = gr.uy;
    const T fxf = gr.x_free ? T(1) : T(0), fyf = gr.y_free ? T(1) : T(0);
    Vec3<T> g_t;
    g_t.x() = d_mean2d.x() * fx * iz + fxf * g_j(0, 2) * (-fx * iz2);
    g_t.y() = d_mean2d.y() * fy * iz + fyf * g_j(1, 2) * (-fy * iz2);
    g_t.z() = -d_mean2d.x() * fx * t.x() * iz2 - d_mean2d.y() * fy * t.y() * iz2 +
              g_j(0, 0) * (-fx * iz2) + g_j(0, 2) * (fx * ux * iz2 + fxf * fx * t.x() * iz3) +
              g_j(1, 1) * (-fy * iz2) + g_j(1, 2) * (fy * uy * iz2 + fyf * fy * t.y() * iz3);
    if (fwd.mode == RenderMode::depth) g_t.z() += sg[6];
    out.params.mean(gi) = w.transpose() * g_t;

    // Sigma = M M^T with M = R S.
    const Vec4<T> q_raw = gp.rotation;
    const T q_norm = q_raw.norm();
    const Vec4<T> qn = q_raw / q_norm;
    const Mat3<T> r = quat_to_matrix<T>(q_raw);
    const Vec3<T> scale = gp.log_scale.array().exp().matrix();
    const Mat3<T> m = r * scale.asDiagonal();
    const Mat3<T> g_m = T(2) * g_sigma * m;
    for (int k = 0; k < 3; ++k) {
      const T d_scale = g_m.col(k).dot(r.col(k));
      out.params.log_scales[3 * gi + k] = d_scale * scale[k];
    }
    const Mat3<T> g_r = g_m * scale.asDiagonal();

    const T qw = qn[0], qx = qn[1], qy = qn[2], qz = qn[3];
    Mat3<T> dw, dxm, dym, dzm;
    dw << T(0), -2 * qz, 2 * qy, 2 * qz, T(0), -2 * qx, -2 * qy, 2 * qx, T(0);
    dxm << T(0), 2 * qy, 2 * qz, 2 * qy, -4 * qx, -2 * qw, 2 * qz, 2 * qw, -4 * qx;
    dym << -4 * qy, 2 * qx, 2 * qw, 2 * qx, T(0), 2 * qz, -2 * qw, 2 * qz, -4 * qy;
    dzm << -4 * qz, -2 * qw, 2 * qx, 2 * qw, -4 * qz, 2 * qy, 2 * qx, 2 * qy, T(0);
    const Vec4<T> g_qn(g_r.cwiseProduct(dw).sum(), g_r.cwiseProduct(dxm).sum(),
                       g_r.cwiseProduct(dym).sum(), g_r.cwiseProduct(dzm).sum());
    const Vec4<T> g_q_raw = (g_qn - qn * qn.dot(g_qn)) / q_norm;
    out.params.rotation(gi) = g_q_raw;
  }
  return out;
}

}  // namespace legs
