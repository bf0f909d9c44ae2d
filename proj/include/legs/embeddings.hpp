#pragma once

// LEGSEMB1 embedding files: query vectors, negatives and per-keyframe target
// grids in one format.
//
//   "LEGSEMB1" u32 version=1 u32 D u32 record_count
//   record: u8 kind (0 flat, 1 grid) f32 scale u32 rows u32 cols f32[rows*cols*D]
//
// Flat sets are 1 x N. Vectors are row-major: entry (r, c) occupies
// data[(r*cols + c)*D .. +D).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "legs/binary_io.hpp"
#include "legs/errors.hpp"

namespace legs {

inline constexpr char kEmbeddingMagic[8] = {'L', 'E', 'G', 'S', 'E', 'M', 'B', '1'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;
inline constexpr double kEmbeddingNormTolerance = 1e-3;

enum class EmbeddingKind : std::uint8_t { flat = 0, grid = 1 };

struct EmbeddingRecord {
  EmbeddingKind kind = EmbeddingKind::flat;
  float scale = 0.0f;
  std::uint32_t rows = 1, cols = 0;
  std::vector<float> data;

  std::size_t count() const { return static_cast<std::size_t>(rows) * cols; }
  const float* vector(std::size_t i, int dim) const { return &data[i * dim]; }
  const float* at(std::uint32_t r, std::uint32_t c, int dim) const {
    return &data[(static_cast<std::size_t>(r) * cols + c) * dim];
  }

  static EmbeddingRecord flat(std::vector<float> vectors, int dim) {
    EmbeddingRecord r;
    r.kind = EmbeddingKind::flat;
    r.rows = 1;
    r.cols = static_cast<std::uint32_t>(vectors.size() / dim);
    r.data = std::move(vectors);
    return r;
  }
};

struct EmbeddingFile {
  int dim = 0;
  std::vector<EmbeddingRecord> records;
};

inline void write_embeddings(const std::string& path, const EmbeddingFile& f) {
  if (f.dim <= 0) throw DataError("embedding dimension must be positive");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path);
  bin::put_bytes(os, kEmbeddingMagic, 8);
  bin::put_u32(os, kEmbeddingVersion);
  bin::put_u32(os, static_cast<std::uint32_t>(f.dim));
  bin::put_u32(os, static_cast<std::uint32_t>(f.records.size()));
  for (const auto& r : f.records) {
    if (r.data.size() != r.count() * f.dim)
      throw DataError("embedding record size does not match rows*cols*D");
    bin::put_u8(os, static_cast<std::uint8_t>(r.kind));
    bin::put_f32(os, r.scale);
    bin::put_u32(os, r.rows);
    bin::put_u32(os, r.cols);
    bin::put_f32s(os, r.data);
  }
}

/// Reads an embedding file. `expected_dim` > 0 enforces the field dimension.
/// Vectors whose norm is off by more than 1e-3 are re-normalized and reported
/// through `warn`.
inline EmbeddingFile read_embeddings(const std::string& path, int expected_dim = 0,
                                     const std::function<void(const std::string&)>& warn = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open embedding file " + path);
  bin::Reader rd(is, path);
  char magic[8];
  rd.bytes(magic, 8);
  if (std::string(magic, 8) != std::string(kEmbeddingMagic, 8))
    throw DataError(path + ": bad magic, expected LEGSEMB1");
  const std::uint32_t version = rd.u32();
  if (version != kEmbeddingVersion)
    throw DataError(path + ": unsupported embedding version " + std::to_string(version) +
                    " (expected " + std::to_string(kEmbeddingVersion) + ")");
  EmbeddingFile f;
  const std::uint32_t d = rd.u32();
  if (d == 0 || d > (1u << 16)) throw DataError(path + ": invalid dimension " + std::to_string(d));
  f.dim = static_cast<int>(d);
  if (expected_dim > 0 && f.dim != expected_dim)
    throw DataError(path + ": embedding dimension " + std::to_string(f.dim) +
                    " does not match configured D=" + std::to_string(expected_dim));
  const std::uint32_t n = rd.u32();
  std::size_t renormalized = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    EmbeddingRecord r;
    const std::uint8_t kind = rd.u8();
    if (kind > 1) throw DataError(path + ": unknown record kind " + std::to_string(kind));
    r.kind = static_cast<EmbeddingKind>(kind);
    r.scale = rd.f32();
    r.rows = rd.u32();
    r.cols = rd.u32();
    if (r.kind == EmbeddingKind::flat && r.rows != 1)
      throw DataError(path + ": flat record must have one row");
    const std::uint64_t count = static_cast<std::uint64_t>(r.rows) * r.cols * d;
    if (count > (1ull << 31)) throw DataError(path + ": record too large");
    r.data = rd.f32s(count);
    for (std::size_t k = 0; k < r.count(); ++k) {
      float* v = &r.data[k * d];
      double sq = 0;
      for (std::uint32_t j = 0; j < d; ++j) sq += static_cast<double>(v[j]) * v[j];
      const double nrm = std::sqrt(sq);
      if (!std::isfinite(nrm) || nrm == 0) throw DataError(path + ": zero or non-finite embedding");
      if (std::abs(nrm - 1.0) > kEmbeddingNormTolerance) {
        for (std::uint32_t j = 0; j < d; ++j) v[j] = static_cast<float>(v[j] / nrm);
        ++renormalized;
      }
    }
    f.records.push_back(std::move(r));
  }
  if (renormalized && warn)
    warn(path + ": re-normalized " + std::to_string(renormalized) + " embedding(s)");
  return f;
}

}  // namespace legs
