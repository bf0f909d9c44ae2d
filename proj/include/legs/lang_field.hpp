#pragma once

// Scale-conditioned language field: hash encoding of the position, the
// normalized scale appended, an MLP with ReLU hidden layers, and an L2
// normalized D-dimensional output.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "legs/errors.hpp"
#include "legs/hash_grid.hpp"

namespace legs {

struct LangFieldConfig {
  HashGridConfig grid;
  int hidden_layers = 3;
  int hidden_width = 64;
  int output_dim = 64;
  double scale_min = 0.05;
  double scale_max = 2.0;

  void validate() const {
    grid.validate();
    if (hidden_layers < 1 || hidden_width < 1 || output_dim < 1)
      throw ConfigError("language MLP sizes must be positive");
    if (!(scale_min > 0 && scale_max > scale_min))
      throw ConfigError("language scale range must satisfy 0 < s_min < s_max");
  }

  int input_dim() const { return grid.encoded_dim() + 1; }

  /// Layer widths from input to output.
  std::vector<int> layer_dims() const {
    std::vector<int> dims{input_dim()};
    for (int i = 0; i < hidden_layers; ++i) dims.push_back(hidden_width);
    dims.push_back(output_dim);
    return dims;
  }

  std::size_t mlp_parameter_count() const {
    const auto d = layer_dims();
    std::size_t n = 0;
    for (std::size_t i = 1; i < d.size(); ++i) n += static_cast<std::size_t>(d[i]) * (d[i - 1] + 1);
    return n;
  }
};

/// Copyable relaxed counter for diagnostics.
class DiagnosticCounter {
 public:
  DiagnosticCounter() = default;
  DiagnosticCounter(const DiagnosticCounter& o) : v_(o.load()) {}
  DiagnosticCounter& operator=(const DiagnosticCounter& o) {
    v_.store(o.load(), std::memory_order_relaxed);
    return *this;
  }
  void add(std::uint64_t n = 1) const { v_.fetch_add(n, std::memory_order_relaxed); }
  std::uint64_t load() const { return v_.load(std::memory_order_relaxed); }
  void store(std::uint64_t n) { v_.store(n, std::memory_order_relaxed); }

 private:
  mutable std::atomic<std::uint64_t> v_{0};
};

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

// Eigen picks its vectorised peel (and with it FMA versus mul+add) from the
// runtime address, so kernels on malloc'd std::vector memory round
// differently under ASLR. Copying into Eigen-owned, max-aligned storage keeps
// every product reproducible across runs.
template <typename T>
MatX<T> owned_block(const T* p, Eigen::Index rows, Eigen::Index cols) {
  MatX<T> m(rows, cols);
  std::copy_n(p, static_cast<std::size_t>(rows * cols), m.data());
  return m;
}

}  // namespace detail

/// Saved forward state of a batch evaluation.
template <typename T>
struct FieldBatch {
  std::size_t count = 0;
  T scale_input = T(0);
  std::vector<HashLookup<T>> lookups;  // count * levels
  std::vector<MatX<T>> activations;    // input, hidden..., pre-normalization output
  MatX<T> output;                      // D x count, unit columns (== row-major count x D)
  std::vector<T> norms;

  std::span<const T> rows() const { return {output.data(), static_cast<std::size_t>(output.size())}; }
};

template <typename T>
struct FieldGradients {
  std::vector<T> tables;
  std::vector<T> mlp;

  void zero(std::size_t n_tables, std::size_t n_mlp) {
    tables.assign(n_tables, T(0));
    mlp.assign(n_mlp, T(0));
  }
};

template <typename T>
class LangField {
 public:
  LangField() = default;

  explicit LangField(const LangFieldConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    tables_.resize(cfg_.grid.parameter_count());
    std::uniform_real_distribution<double> table_init(-1e-4, 1e-4);
    for (auto& v : tables_) v = T(table_init(rng));
    mlp_.assign(cfg_.mlp_parameter_count(), T(0));
    const auto dims = cfg_.layer_dims();
    std::size_t off = 0;
    for (std::size_t l = 1; l < dims.size(); ++l) {
      const double bound = std::sqrt(6.0 / dims[l - 1]);  // Kaiming uniform, ReLU gain
      std::uniform_real_distribution<double> w_init(-bound, bound);
      const std::size_t nw = static_cast<std::size_t>(dims[l]) * dims[l - 1];
      for (std::size_t k = 0; k < nw; ++k) mlp_[off + k] = T(w_init(rng));
      off += nw + dims[l];  // biases start at zero
    }
  }

  const LangFieldConfig& config() const { return cfg_; }
  int dim() const { return cfg_.output_dim; }

  std::vector<T>& tables() { return tables_; }
  const std::vector<T>& tables() const { return tables_; }
  std::vector<T>& mlp_params() { return mlp_; }
  const std::vector<T>& mlp_params() const { return mlp_; }

  std::uint64_t scale_clamp_count() const { return clamped_.load(); }
  void set_scale_clamp_count(std::uint64_t n) { clamped_.store(n); }

  /// Maps a physical scale to the MLP's [0, 1] input, clamping (and counting)
  /// out-of-range values.
  T scale_input(double s) const {
    if (!(s >= cfg_.scale_min && s <= cfg_.scale_max)) {
      clamped_.add();
      s = std::isnan(s) ? cfg_.scale_min : std::min(cfg_.scale_max, std::max(cfg_.scale_min, s));
    }
    return T((s - cfg_.scale_min) / (cfg_.scale_max - cfg_.scale_min));
  }

  /// Hash encodings of `count` points (means row-major count x 3), as a
  /// (L*F) x count matrix. Independent of the scale, so callers may reuse it.
  MatX<T> encode(std::span<const T> means, std::vector<HashLookup<T>>* lookups = nullptr) const {
    const std::size_t n = means.size() / 3;
    const int enc = cfg_.grid.encoded_dim();
    MatX<T> z(enc, static_cast<Eigen::Index>(n));
    std::vector<HashLookup<T>> local;
    std::vector<HashLookup<T>>& lk = lookups ? *lookups : local;
    lk.resize(n * cfg_.grid.levels);
    for (std::size_t i = 0; i < n; ++i)
      hash_encode(cfg_.grid, tables_, &means[3 * i], z.col(static_cast<Eigen::Index>(i)).data(),
                  &lk[i * cfg_.grid.levels]);
    return z;
  }

  /// Runs the MLP on precomputed encodings at the given scale. Returns the
  /// D x count matrix of unit embeddings.
  FieldBatch<T> forward_encoded(const MatX<T>& z, double s) const {
    FieldBatch<T> b;
    b.count = static_cast<std::size_t>(z.cols());
    b.scale_input = scale_input(s);
    MatX<T> x(z.rows() + 1, z.cols());
    x.topRows(z.rows()) = z;
    x.row(z.rows()).setConstant(b.scale_input);
    b.activations.push_back(std::move(x));
    const auto dims = cfg_.layer_dims();
    std::size_t off = 0;
    for (std::size_t l = 1; l < dims.size(); ++l) {
      const MatX<T> w = detail::owned_block(&mlp_[off], dims[l], dims[l - 1]);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> bias =
          detail::owned_block(&mlp_[off + static_cast<std::size_t>(dims[l]) * dims[l - 1]], dims[l], 1);
      off += static_cast<std::size_t>(dims[l]) * (dims[l - 1] + 1);
      MatX<T> h = w * b.activations.back();
      h.colwise() += bias;
      if (l + 1 < dims.size()) h = h.cwiseMax(T(0));
      b.activations.push_back(std::move(h));
    }
    const MatX<T>& u = b.activations.back();
    b.output.resize(u.rows(), u.cols());
    b.norms.resize(b.count);
    for (Eigen::Index i = 0; i < u.cols(); ++i) {
      const T nrm = std::max(u.col(i).norm(), T(1e-12));
      b.norms[i] = nrm;
      b.output.col(i) = u.col(i) / nrm;
    }
    return b;
  }

  /// Batch evaluation with the state needed for backward().
  FieldBatch<T> forward(std::span<const T> means, double s) const {
    std::vector<HashLookup<T>> lookups;
    const MatX<T> z = encode(means, &lookups);
    FieldBatch<T> b = forward_encoded(z, s);
    b.lookups = std::move(lookups);
    return b;
  }

  /// Single point evaluation.
  Eigen::Matrix<T, Eigen::Dynamic, 1> eval(const Eigen::Matrix<T, 3, 1>& x, double s) const {
    const FieldBatch<T> b = forward(std::span<const T>(x.data(), 3), s);
    return b.output.col(0);
  }

  /// Accumulates parameter gradients for upstream gradient `grad_rows`
  /// (row-major count x D, i.e. D x count column-major).
  void backward(const FieldBatch<T>& b, std::span<const T> grad_rows, FieldGradients<T>& g) const {
    if (b.lookups.size() != b.count * cfg_.grid.levels)
      throw DataError("field backward needs a forward() batch with hash lookups");
    if (g.tables.size() != tables_.size() || g.mlp.size() != mlp_.size())
      g.zero(tables_.size(), mlp_.size());
    const int d_out = cfg_.output_dim;
    const MatX<T> gy = detail::owned_block(grad_rows.data(), d_out, static_cast<Eigen::Index>(b.count));

    MatX<T> gh(d_out, static_cast<Eigen::Index>(b.count));
    for (Eigen::Index i = 0; i < gy.cols(); ++i) {
      const auto y = b.output.col(i);
      gh.col(i) = (gy.col(i) - y * y.dot(gy.col(i))) / b.norms[i];
    }

    const auto dims = cfg_.layer_dims();
    std::vector<std::size_t> offsets(dims.size(), 0);
    for (std::size_t l = 1, acc = 0; l < dims.size(); ++l) {
      offsets[l] = acc;
      acc += static_cast<std::size_t>(dims[l]) * (dims[l - 1] + 1);
    }
    for (std::size_t l = dims.size() - 1; l >= 1; --l) {
      const std::size_t off = offsets[l];
      const std::size_t nw = static_cast<std::size_t>(dims[l]) * dims[l - 1];
      const MatX<T> w = detail::owned_block(&mlp_[off], dims[l], dims[l - 1]);
      const MatX<T>& input = b.activations[l - 1];
      const MatX<T> dw = gh * input.transpose();
      const Eigen::Matrix<T, Eigen::Dynamic, 1> db = gh.rowwise().sum();
      T* gw = &g.mlp[off];
      for (std::size_t k = 0; k < nw; ++k) gw[k] += dw.data()[k];
      for (Eigen::Index k = 0; k < db.size(); ++k) gw[nw + static_cast<std::size_t>(k)] += db[k];
      MatX<T> gx = w.transpose() * gh;
      if (l > 1) gx = gx.cwiseProduct((input.array() > T(0)).template cast<T>().matrix());
      gh = std::move(gx);
      if (l == 1) break;
    }

    // gh is now d loss / d input; scatter the encoding rows into the tables.
    const int f = cfg_.grid.features_per_level;
    for (std::size_t i = 0; i < b.count; ++i)
      for (int l = 0; l < cfg_.grid.levels; ++l) {
        const HashLookup<T>& lk = b.lookups[i * cfg_.grid.levels + l];
        const T* gz = gh.col(static_cast<Eigen::Index>(i)).data() + l * f;
        for (int c = 0; c < 8; ++c) {
          T* dst = &g.tables[static_cast<std::size_t>(lk.index[c]) * f];
          for (int k = 0; k < f; ++k) dst[k] += lk.weight[c] * gz[k];
        }
      }
  }

  template <typename U>
  LangField<U> cast() const {
    LangField<U> out;
    out.cfg_ = cfg_;
    out.tables_.assign(tables_.begin(), tables_.end());
    out.mlp_.assign(mlp_.begin(), mlp_.end());
    return out;
  }

 private:
  template <typename>
  friend class LangField;

  LangFieldConfig cfg_;
  std::vector<T> tables_;
  std::vector<T> mlp_;  // per layer: W (out x in, column-major) then b (out)
  DiagnosticCounter clamped_;
};

}  // namespace legs
