#pragma once

// Multi-resolution hash encoding: per level, the 8 corners of the grid cell
// containing x are hashed into a table of learnable feature vectors and
// trilinearly interpolated; levels are concatenated.

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "legs/errors.hpp"

namespace legs {

inline constexpr std::uint32_t kHashPrime1 = 1u;
inline constexpr std::uint32_t kHashPrime2 = 2654435761u;
inline constexpr std::uint32_t kHashPrime3 = 805459861u;

struct HashGridConfig {
  int levels = 8;
  std::uint32_t table_size = 1u << 19;
  int features_per_level = 4;
  int base_resolution = 16;
  int max_resolution = 512;
  Eigen::Vector3d aabb_min = Eigen::Vector3d::Constant(-1.0);
  Eigen::Vector3d aabb_max = Eigen::Vector3d::Constant(1.0);

  void validate() const {
    if (levels < 1) throw ConfigError("hash grid needs at least one level");
    if (table_size == 0 || (table_size & (table_size - 1)) != 0)
      throw ConfigError("hash table size must be a power of two");
    if (features_per_level < 1) throw ConfigError("features_per_level must be positive");
    if (!(base_resolution >= 2 && max_resolution > base_resolution))
      throw ConfigError("hash grid resolutions must satisfy max > base >= 2");
    if (!((aabb_max - aabb_min).array() > 0).all())
      throw ConfigError("hash grid AABB must have positive extent");
  }

  double growth_factor() const {
    if (levels == 1) return 1.0;
    return std::exp((std::log(static_cast<double>(max_resolution)) -
                     std::log(static_cast<double>(base_resolution))) /
                    (levels - 1));
  }

  /// floor(N_min * b^l). The tiny offset keeps the last level at N_max
  /// despite rounding in b.
  int resolution(int level) const {
    return static_cast<int>(std::floor(base_resolution * std::pow(growth_factor(), level) + 1e-9));
  }

  int encoded_dim() const { return levels * features_per_level; }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(levels) * table_size * features_per_level;
  }
};

/// Spatial hash of integer corner coordinates, modulo the (power of two)
/// table size.
inline std::uint32_t hash_corner(std::uint32_t x, std::uint32_t y, std::uint32_t z,
                                 std::uint32_t table_size) {
  return ((x * kHashPrime1) ^ (y * kHashPrime2) ^ (z * kHashPrime3)) & (table_size - 1);
}

/// Table offsets and trilinear weights of the 8 corners at every level.
template <typename T>
struct HashLookup {
  std::uint32_t index[8];  // absolute offset of the entry (level base included), in entries
  T weight[8];
};

template <typename T>
void hash_lookup(const HashGridConfig& cfg, const T* x, HashLookup<T>* out_levels) {
  T unit[3];
  for (int d = 0; d < 3; ++d) {
    const T lo = T(cfg.aabb_min[d]), hi = T(cfg.aabb_max[d]);
    T u = (x[d] - lo) / (hi - lo);
    unit[d] = std::min(T(1), std::max(T(0), u));
  }
  for (int l = 0; l < cfg.levels; ++l) {
    const T res = T(cfg.resolution(l));
    std::uint32_t cell[3];
    T frac[3];
    for (int d = 0; d < 3; ++d) {
      const T g = unit[d] * res;
      const T f = std::floor(g);
      cell[d] = static_cast<std::uint32_t>(f);
      frac[d] = g - f;
    }
    HashLookup<T>& lk = out_levels[l];
    const std::uint32_t base = static_cast<std::uint32_t>(l) * cfg.table_size;
    for (int c = 0; c < 8; ++c) {
      const std::uint32_t ox = c & 1, oy = (c >> 1) & 1, oz = (c >> 2) & 1;
      lk.index[c] = base + hash_corner(cell[0] + ox, cell[1] + oy, cell[2] + oz, cfg.table_size);
      lk.weight[c] = (ox ? frac[0] : T(1) - frac[0]) * (oy ? frac[1] : T(1) - frac[1]) *
                     (oz ? frac[2] : T(1) - frac[2]);
    }
  }
}

/// Encodes x into out[0 .. L*F) using tables laid out [level][entry][feature].
template <typename T>
void hash_encode(const HashGridConfig& cfg, const std::vector<T>& tables, const T* x, T* out,
                 HashLookup<T>* lookups) {
  hash_lookup(cfg, x, lookups);
  const int f = cfg.features_per_level;
  for (int l = 0; l < cfg.levels; ++l) {
    T* dst = out + l * f;
    for (int k = 0; k < f; ++k) dst[k] = T(0);
    const HashLookup<T>& lk = lookups[l];
    for (int c = 0; c < 8; ++c) {
      const T* entry = &tables[static_cast<std::size_t>(lk.index[c]) * f];
      for (int k = 0; k < f; ++k) dst[k] += lk.weight[c] * entry[k];
    }
  }
}

}  // namespace legs
