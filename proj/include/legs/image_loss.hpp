#pragma once

// Photometric loss (1 - lambda) * L1 + lambda * (1 - SSIM) with its gradient
// with respect to the rendered image.

#include <array>
#include <cmath>
#include <vector>

#include "legs/geom.hpp"

namespace legs {

namespace detail {

inline constexpr int kSsimRadius = 5;  // 11x11 window
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline const std::array<double, 2 * kSsimRadius + 1>& ssim_window() {
  static const auto w = [] {
    std::array<double, 2 * kSsimRadius + 1> k{};
    double sum = 0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i)
      sum += k[i + kSsimRadius] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
    for (auto& x : k) x /= sum;
    return k;
  }();
  return w;
}

// Separable Gaussian filter with zero padding. Symmetric, so it is its own
// adjoint, which the SSIM gradient relies on.
inline std::vector<double> gaussian_blur(const std::vector<double>& in, int w, int h) {
  const auto& k = ssim_window();
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
        const int xx = x + d;
        if (xx >= 0 && xx < w) acc += k[d + kSsimRadius] * in[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
        const int yy = y + d;
        if (yy >= 0 && yy < h) acc += k[d + kSsimRadius] * tmp[yy * w + x];
      }
      out[y * w + x] = acc;
    }
  return out;
}

}  // namespace detail

struct SsimResult {
  double value = 1.0;          // mean SSIM over pixels and channels
  std::vector<double> grad;    // d value / d rendered, same layout as the image
};

/// Mean SSIM of `a` against reference `b` and its gradient with respect to `a`.
template <typename T>
SsimResult ssim(const ImageT<T>& a, const ImageT<T>& b, bool with_grad = true) {
  if (!a.same_shape(b)) throw DataError("image dimension mismatch");
  const int w = a.width, h = a.height, ch = a.channels;
  const std::size_t np = a.pixel_count();
  SsimResult res;
  if (with_grad) res.grad.assign(a.data.size(), 0.0);
  double total = 0;
  const double norm = 1.0 / static_cast<double>(np * ch);
  std::vector<double> x(np), y(np), xx(np), yy(np), xy(np);
  for (int c = 0; c < ch; ++c) {
    for (std::size_t p = 0; p < np; ++p) {
      x[p] = a.data[p * ch + c];
      y[p] = b.data[p * ch + c];
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = detail::gaussian_blur(x, w, h), my = detail::gaussian_blur(y, w, h);
    const auto exx = detail::gaussian_blur(xx, w, h), eyy = detail::gaussian_blur(yy, w, h);
    const auto exy = detail::gaussian_blur(xy, w, h);
    std::vector<double> d_mu(np), d_exx(np), d_exy(np);
    for (std::size_t p = 0; p < np; ++p) {
      const double sxx = exx[p] - mx[p] * mx[p], syy = eyy[p] - my[p] * my[p];
      const double sxy = exy[p] - mx[p] * my[p];
      const double a1 = 2 * mx[p] * my[p] + detail::kSsimC1, a2 = 2 * sxy + detail::kSsimC2;
      const double b1 = mx[p] * mx[p] + my[p] * my[p] + detail::kSsimC1;
      const double b2 = sxx + syy + detail::kSsimC2;
      const double s = a1 * a2 / (b1 * b2);
      total += s;
      if (with_grad) {
        d_mu[p] = (2 * my[p] * a2 - 2 * my[p] * a1) / (b1 * b2) -
                  s * (2 * mx[p] / b1 - 2 * mx[p] / b2);
        d_exx[p] = -s / b2;
        d_exy[p] = 2 * a1 / (b1 * b2);
      }
    }
    if (with_grad) {
      const auto g_mu = detail::gaussian_blur(d_mu, w, h);
      const auto g_xx = detail::gaussian_blur(d_exx, w, h);
      const auto g_xy = detail::gaussian_blur(d_exy, w, h);
      for (std::size_t p = 0; p < np; ++p)
        res.grad[p * ch + c] = norm * (g_mu[p] + 2 * x[p] * g_xx[p] + y[p] * g_xy[p]);
    }
  }
  res.value = total * norm;
  return res;
}

template <typename T>
struct PhotometricLoss {
  double l1 = 0, ssim = 1, total = 0;
  ImageT<T> grad;  // d total / d rendered
};

template <typename T>
PhotometricLoss<T> photometric_loss(const ImageT<T>& rendered, const ImageT<T>& target,
                                    double lambda_ssim) {
  if (!rendered.same_shape(target)) throw DataError("image dimension mismatch");
  PhotometricLoss<T> out;
  out.grad = ImageT<T>(rendered.width, rendered.height, rendered.channels);
  const double n = static_cast<double>(rendered.data.size());
  double l1 = 0;
  for (std::size_t i = 0; i < rendered.data.size(); ++i) {
    const double d = static_cast<double>(rendered.data[i]) - target.data[i];
    l1 += std::abs(d);
    out.grad.data[i] = static_cast<T>((1.0 - lambda_ssim) * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) / n);
  }
  out.l1 = l1 / n;
  if (lambda_ssim > 0) {
    const auto s = ssim(rendered, target);
    out.ssim = s.value;
    for (std::size_t i = 0; i < rendered.data.size(); ++i)
      out.grad.data[i] += static_cast<T>(-lambda_ssim * s.grad[i]);
  }
  out.total = (1.0 - lambda_ssim) * out.l1 + lambda_ssim * (1.0 - out.ssim);
  return out;
}

}  // namespace legs
