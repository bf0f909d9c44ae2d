#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace legs {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
};

/// First/second moments of one parameter group. The step counter is shared by
/// the whole group (rows added later start from zero moments).
template <typename T>
struct AdamMoments {
  std::vector<T> m, v;
  std::uint64_t step = 0;

  void resize(std::size_t n) {
    m.resize(n, T(0));
    v.resize(n, T(0));
  }
};

template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, AdamMoments<T>& st, double lr,
                 const AdamConfig& cfg = {}) {
  st.resize(params.size());
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T step_size = T(lr / bc1);
  const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
  const T eps = T(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    st.m[i] = b1 * st.m[i] + (T(1) - b1) * g;
    st.v[i] = b2 * st.v[i] + (T(1) - b2) * g * g;
    params[i] -= step_size * st.m[i] / (std::sqrt(st.v[i]) * inv_sqrt_bc2 + eps);
  }
}

}  // namespace legs
