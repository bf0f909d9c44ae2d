#pragma once

// Incremental joint optimization of the Gaussians and the language field.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "legs/adam.hpp"
#include "legs/embeddings.hpp"
#include "legs/errors.hpp"
#include "legs/image_loss.hpp"
#include "legs/json_codec.hpp"
#include "legs/lang_field.hpp"
#include "legs/rasterizer.hpp"
#include "legs/snapshot.hpp"
#include "legs/stream.hpp"

namespace legs {

struct LearningRates {
  double mean = 1.6e-4;  // multiplied by the scene extent
  double log_scale = 5e-3;
  double rotation = 1e-3;
  double opacity = 5e-2;
  double color = 2.5e-3;
  double field = 1e-2;  // hash tables and MLP

  double of(ParamGroup g, double extent) const {
    switch (g) {
      case ParamGroup::mean: return mean * extent;
      case ParamGroup::log_scale: return log_scale;
      case ParamGroup::rotation: return rotation;
      case ParamGroup::opacity: return opacity;
      case ParamGroup::color: return color;
    }
    return 0.0;
  }
};

enum class ScaleSampling { log_uniform, uniform };

struct TrainConfig {
  LearningRates lr;
  double lambda_ssim = 0.2;
  double lambda_lang = 0.1;
  bool language = true;  // false: no language field at all

  int densify_interval = 100;
  int densify_from = 500;
  int densify_until = 15000;
  double densify_grad_threshold = 2e-4;  // mean screen-space gradient, NDC units
  double split_scale_fraction = 0.01;    // of the scene extent
  double prune_opacity = 0.005;
  std::size_t max_gaussians = 500000;

  int init_samples = 500;
  ScaleSampling scale_sampling = ScaleSampling::log_uniform;
  int iterations = 3000;
  std::uint64_t seed = 0;
  int iterations_per_keyframe = 100;  // online mode ingestion rate
  int eval_interval = 500;
  int nan_check_interval = 100;
  int snapshot_interval = 100;
  int lang_downsample = 4;  // used when a keyframe has no target grids to size the render
  double scene_extent = 0.0;  // 0: derived from the first keyframe's initial points
  std::array<double, 3> background = {0.0, 0.0, 0.0};
  bool rebase_gaussians = false;

  void validate() const {
    for (double r : {lr.mean, lr.log_scale, lr.rotation, lr.opacity, lr.color, lr.field})
      if (!(r > 0)) throw ConfigError("learning rates must be positive");
    if (!(prune_opacity > 0 && prune_opacity < 1)) throw ConfigError("prune_opacity must lie in (0, 1)");
    if (!(lambda_ssim >= 0 && lambda_ssim <= 1)) throw ConfigError("lambda_ssim must lie in [0, 1]");
    if (!(lambda_lang >= 0)) throw ConfigError("lambda_lang must be non-negative");
    if (densify_interval < 1 || iterations < 0 || init_samples < 1 || iterations_per_keyframe < 1 ||
        eval_interval < 1 || nan_check_interval < 1 || snapshot_interval < 1 || lang_downsample < 1)
      throw ConfigError("train intervals and counts must be positive");
    if (max_gaussians < 1) throw ConfigError("max_gaussians must be positive");
    if (scene_extent < 0) throw ConfigError("scene_extent must be non-negative");
  }
};

/// A training view: camera, colour image and optional embedding target grids
/// sorted by scale.
struct TrainView {
  std::uint64_t seq = 0;
  PinholeCamera camera;
  Image image;
  std::vector<EmbeddingRecord> targets;
};

struct StepLosses {
  std::uint64_t iteration = 0;
  std::uint64_t keyframe = 0;
  double l1 = 0, ssim = 1, rgb = 0, total = 0;
  std::optional<double> lang;
  double scale = 0;
  double psnr = 0;
  std::size_t gaussians = 0;
};

struct DensifyStats {
  std::size_t cloned = 0, split = 0, pruned = 0, capped = 0;
  bool changed() const { return cloned || split || pruned || capped; }
};

/// Everything a checkpoint needs to resume bit-exactly.
struct TrainerState {
  GaussianCloud<float> gaussians;
  std::optional<LangField<float>> field;
  std::array<AdamMoments<float>, kParamGroupCount> moments;
  AdamMoments<float> table_moments, mlp_moments;
  std::vector<float> grad_accum;  // accumulated NDC mean-gradient norms
  std::vector<float> grad_count;
  std::vector<TrainView> views;
  std::uint64_t iteration = 0;
  double scene_extent = 0.0;
  std::mt19937_64 rng;       // keyframe sampling, initialization, splitting
  std::mt19937_64 lang_rng;  // scale sampling only, so the language path never perturbs geometry
};

inline std::string scale_sampling_name(ScaleSampling s) {
  return s == ScaleSampling::uniform ? "uniform" : "log_uniform";
}

class Trainer {
 public:
  using Warn = std::function<void(const std::string&)>;

  Trainer(const TrainConfig& cfg, const LangFieldConfig& field_cfg, Warn warn = {})
      : cfg_(cfg), field_cfg_(field_cfg), warn_(std::move(warn)) {
    cfg_.validate();
    field_cfg_.validate();
    st_.rng.seed(cfg_.seed);
    st_.lang_rng.seed(cfg_.seed ^ 0x9e3779b97f4a7c15ull);
    st_.scene_extent = cfg_.scene_extent;
    if (cfg_.language) st_.field.emplace(field_cfg_, cfg_.seed + 1);
  }

  const TrainConfig& config() const { return cfg_; }
  const LangFieldConfig& field_config() const { return field_cfg_; }
  TrainerState& state() { return st_; }
  const TrainerState& state() const { return st_; }
  std::uint64_t iteration() const { return st_.iteration; }
  std::size_t gaussian_count() const { return st_.gaussians.size(); }

  // -------------------------------------------------------------------------
  // Keyframes
  // -------------------------------------------------------------------------

  /// Adds a loaded keyframe to the training set. With `init_gaussians`, up to
  /// init_samples valid-depth pixels are deprojected into new Gaussians.
  /// Embedding targets are read from `stream_dir` when the keyframe names a file.
  void ingest_keyframe(const Keyframe& kf, const fs::path& stream_dir, bool init_gaussians = true) {
    if (!kf.has_images()) throw DataError("keyframe seq " + std::to_string(kf.seq) + " has no images");
    if (!st_.views.empty() && kf.seq <= st_.views.back().seq)
      throw DataError("keyframe seq " + std::to_string(kf.seq) + " is not increasing");
    TrainView view;
    view.seq = kf.seq;
    view.camera = kf.camera;
    view.image = kf.image;
    if (!kf.embeddings_file.empty() && st_.field) {
      auto file = read_embeddings((stream_dir / kf.embeddings_file).string(), field_cfg_.output_dim, warn_);
      for (auto& r : file.records)
        if (r.kind == EmbeddingKind::grid) view.targets.push_back(std::move(r));
      std::stable_sort(view.targets.begin(), view.targets.end(),
                       [](const auto& a, const auto& b) { return a.scale < b.scale; });
    }
    if (init_gaussians) initialize_from_depth(kf);
    st_.views.push_back(std::move(view));
  }

  /// Replaces keyframe poses. In rebase mode every Gaussian anchored to a
  /// corrected keyframe moves rigidly with it. Unknown seqs reject the whole
  /// event before anything changes.
  void apply_pose_update(const PoseUpdateEvent& ev, std::optional<bool> rebase = std::nullopt) {
    const bool do_rebase = rebase.value_or(cfg_.rebase_gaussians);
    std::map<std::uint64_t, std::size_t> index;
    for (std::size_t i = 0; i < st_.views.size(); ++i) index[st_.views[i].seq] = i;
    for (const auto& c : ev.corrections)
      if (!index.count(c.seq))
        throw DataError("pose update (trigger " + std::to_string(ev.trigger_seq) +
                        ") references unknown keyframe seq " + std::to_string(c.seq));
    std::map<std::uint64_t, Se3Pose> delta;
    for (const auto& c : ev.corrections) {
      TrainView& v = st_.views[index[c.seq]];
      if (do_rebase) delta[c.seq] = se3_compose(c.pose, se3_inverse(v.camera.pose));
      v.camera.pose = c.pose;
    }
    if (!do_rebase) return;
    auto& g = st_.gaussians;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto it = delta.find(g.anchors[i]);
      if (it == delta.end()) continue;
      const Eigen::Vector3d mu = se3_apply(it->second, g.mean(i).template cast<double>());
      g.mean(i) = mu.cast<float>();
      const Vec4<float> q = g.rotation(i);
      const Eigen::Quaterniond qr =
          it->second.rotation * Eigen::Quaterniond(q[0], q[1], q[2], q[3]);
      g.rotation(i) = Vec4<float>(float(qr.w()), float(qr.x()), float(qr.y()), float(qr.z()));
    }
  }

  // -------------------------------------------------------------------------
  // Optimization
  // -------------------------------------------------------------------------

  StepLosses train_step() {
    if (st_.views.empty()) throw DataError("train_step needs at least one keyframe");
    auto& g = st_.gaussians;
    std::uniform_int_distribution<std::size_t> pick(0, st_.views.size() - 1);
    const TrainView& view = st_.views[pick(st_.rng)];
    StepLosses out;
    out.keyframe = view.seq;

    const std::array<float, 3> bg = background();
    const auto fwd = render<float>(g, view.camera, RenderMode::color, bg);
    const auto loss = photometric_loss(fwd.image, view.image, cfg_.lambda_ssim);
    const RenderGradients<float> grads = render_backward<float>(g, fwd, loss.grad);
    out.l1 = loss.l1;
    out.ssim = loss.ssim;
    out.rgb = loss.total;
    out.total = loss.total;
    out.psnr = psnr(fwd.image, view.image);

    std::optional<FieldGradients<float>> field_grads;
    if (st_.field && cfg_.lambda_lang > 0 && !view.targets.empty()) {
      field_grads.emplace();
      const double lang = language_step(view, *field_grads, out.scale);
      out.lang = lang;
      out.total += cfg_.lambda_lang * lang;
    }

    for (int gi = 0; gi < kParamGroupCount; ++gi) {
      const auto group = static_cast<ParamGroup>(gi);
      adam_update<float>(g.group(group), grads.params.group(group), st_.moments[gi],
                         cfg_.lr.of(group, st_.scene_extent), adam_);
    }
    if (field_grads) {
      LangField<float>& f = *st_.field;
      adam_update<float>(f.tables(), field_grads->tables, st_.table_moments, cfg_.lr.field, adam_);
      adam_update<float>(f.mlp_params(), field_grads->mlp, st_.mlp_moments, cfg_.lr.field, adam_);
    }

    // Screen-space gradient statistics for densification, in NDC units.
    const float ndc = 0.5f * static_cast<float>(std::max(view.camera.width, view.camera.height));
    st_.grad_accum.resize(g.size(), 0.0f);
    st_.grad_count.resize(g.size(), 0.0f);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (grads.visible[i]) {
        st_.grad_accum[i] += grads.mean2d_grad_norm[i] * ndc;
        st_.grad_count[i] += 1.0f;
      }

    ++st_.iteration;
    out.iteration = st_.iteration;
    out.gaussians = g.size();
    if (!std::isfinite(out.total))
      throw NumericalError("non-finite loss at iteration " + std::to_string(st_.iteration));
    return out;
  }

  /// Throws NumericalError naming the first parameter group holding NaN/Inf.
  void check_finite() const {
    static const char* names[] = {"mean", "log_scale", "rotation", "opacity", "color"};
    for (int gi = 0; gi < kParamGroupCount; ++gi)
      for (float v : st_.gaussians.group(static_cast<ParamGroup>(gi)))
        if (!std::isfinite(v))
          throw NumericalError(std::string("non-finite Gaussian ") + names[gi] + " at iteration " +
                               std::to_string(st_.iteration));
    if (st_.field) {
      for (float v : st_.field->tables())
        if (!std::isfinite(v))
          throw NumericalError("non-finite hash table entry at iteration " + std::to_string(st_.iteration));
      for (float v : st_.field->mlp_params())
        if (!std::isfinite(v))
          throw NumericalError("non-finite MLP weight at iteration " + std::to_string(st_.iteration));
    }
  }

  /// Clone / split Gaussians whose mean screen-space gradient exceeds the
  /// threshold, then prune transparent ones and enforce the count cap.
  DensifyStats densify_and_prune() {
    auto& g = st_.gaussians;
    const std::size_t n = g.size();
    st_.grad_accum.resize(n, 0.0f);
    st_.grad_count.resize(n, 0.0f);
    DensifyStats stats;
    const float split_limit = static_cast<float>(cfg_.split_scale_fraction * st_.scene_extent);

    std::vector<std::int64_t> source;  // new index -> old index, -1 for fresh Gaussians
    GaussianCloud<float> next;
    std::vector<Gaussian<float>> added;
    std::vector<std::uint8_t> remove(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const float count = st_.grad_count[i];
      if (count <= 0 || st_.grad_accum[i] / count <= cfg_.densify_grad_threshold) continue;
      const Gaussian<float> gi = g.get(i);
      const float max_scale = std::exp(gi.log_scale.maxCoeff());
      if (max_scale <= split_limit) {
        added.push_back(gi);
        ++stats.cloned;
      } else {
        const Mat3<float> r = quat_to_matrix<float>(gi.rotation);
        const Vec3<float> s = gi.log_scale.array().exp().matrix();
        std::normal_distribution<float> normal(0.0f, 1.0f);
        for (int k = 0; k < 2; ++k) {
          Gaussian<float> child = gi;
          const Vec3<float> z(normal(st_.rng), normal(st_.rng), normal(st_.rng));
          child.mean = gi.mean + r * s.cwiseProduct(z);
          child.log_scale = (s / 1.6f).array().log().matrix();
          added.push_back(child);
        }
        remove[i] = 1;
        ++stats.split;
      }
    }
    for (std::size_t i = 0; i < n; ++i)
      if (!remove[i] && sigmoid(g.opacity_logits[i]) < cfg_.prune_opacity) {
        remove[i] = 1;
        ++stats.pruned;
      }
    for (std::size_t i = 0; i < n; ++i)
      if (!remove[i]) source.push_back(static_cast<std::int64_t>(i));
    std::size_t total = source.size();
    for (const auto& a : added)
      if (sigmoid(a.opacity_logit) >= cfg_.prune_opacity) ++total;

    // Cap: drop the lowest-opacity Gaussians (index order on ties).
    std::vector<Gaussian<float>> fresh;
    for (const auto& a : added)
      if (sigmoid(a.opacity_logit) >= cfg_.prune_opacity) fresh.push_back(a);
    if (total > cfg_.max_gaussians) {
      struct Entry {
        float opacity;
        std::size_t order;
      };
      std::vector<Entry> all;
      for (std::size_t k = 0; k < source.size(); ++k) all.push_back({g.opacity_logits[source[k]], k});
      for (std::size_t k = 0; k < fresh.size(); ++k)
        all.push_back({fresh[k].opacity_logit, source.size() + k});
      std::stable_sort(all.begin(), all.end(),
                       [](const Entry& a, const Entry& b) { return a.opacity < b.opacity; });
      std::vector<std::uint8_t> drop(all.size(), 0);
      const std::size_t excess = total - cfg_.max_gaussians;
      for (std::size_t k = 0; k < excess; ++k) drop[all[k].order] = 1;
      stats.capped = excess;
      std::vector<std::int64_t> src2;
      for (std::size_t k = 0; k < source.size(); ++k)
        if (!drop[k]) src2.push_back(source[k]);
      std::vector<Gaussian<float>> fresh2;
      for (std::size_t k = 0; k < fresh.size(); ++k)
        if (!drop[source.size() + k]) fresh2.push_back(fresh[k]);
      source = std::move(src2);
      fresh = std::move(fresh2);
    }
    if (!stats.changed()) {
      std::fill(st_.grad_accum.begin(), st_.grad_accum.end(), 0.0f);
      std::fill(st_.grad_count.begin(), st_.grad_count.end(), 0.0f);
      return stats;
    }

    std::vector<std::uint32_t> keep(source.begin(), source.end());
    next = g.select(keep);
    for (const auto& a : fresh) next.push_back(a);
    for (std::size_t k = 0; k < fresh.size(); ++k) source.push_back(-1);
    for (int gi = 0; gi < kParamGroupCount; ++gi) remap_moments(st_.moments[gi], source, kParamGroupWidth[gi]);
    g = std::move(next);
    st_.grad_accum.assign(g.size(), 0.0f);
    st_.grad_count.assign(g.size(), 0.0f);
    return stats;
  }

  // -------------------------------------------------------------------------
  // Evaluation
  // -------------------------------------------------------------------------

  Image render_view(const PinholeCamera& cam) const {
    const auto bg = background();
    return render<float>(st_.gaussians, cam, RenderMode::color, bg).image;
  }

  /// Mean PSNR over the given views (keyframes with loaded images).
  double mean_psnr(const std::vector<Keyframe>& views) const {
    if (views.empty()) return 0.0;
    double acc = 0;
    for (const auto& v : views) acc += psnr(render_view(v.camera), v.image);
    return acc / static_cast<double>(views.size());
  }

  double train_psnr() const {
    if (st_.views.empty()) return 0.0;
    double acc = 0;
    for (const auto& v : st_.views) acc += psnr(render_view(v.camera), v.image);
    return acc / static_cast<double>(st_.views.size());
  }

  SnapshotPtr snapshot() const {
    auto s = std::make_shared<SceneSnapshot>();
    s->gaussians = st_.gaussians;
    if (st_.field) {
      s->field = *st_.field;
      s->has_field = true;
    }
    s->prune_opacity = cfg_.prune_opacity;
    s->background = background();
    s->iteration = st_.iteration;
    return s;
  }

 private:
  std::array<float, 3> background() const {
    return {float(cfg_.background[0]), float(cfg_.background[1]), float(cfg_.background[2])};
  }

  void warn(const std::string& msg) const {
    if (warn_) warn_(msg);
  }

  void initialize_from_depth(const Keyframe& kf) {
    std::vector<std::uint32_t> valid;
    for (std::uint32_t p = 0; p < kf.depth.data.size(); ++p) {
      const float d = kf.depth.data[p];
      if (std::isfinite(d) && d > 0) valid.push_back(p);
    }
    if (valid.empty()) {
      warn("keyframe seq " + std::to_string(kf.seq) + " has no valid depth; no Gaussians added");
      return;
    }
    // Partial Fisher-Yates: a uniform sample without replacement.
    const std::size_t take = std::min<std::size_t>(cfg_.init_samples, valid.size());
    for (std::size_t k = 0; k < take; ++k) {
      std::uniform_int_distribution<std::size_t> u(k, valid.size() - 1);
      std::swap(valid[k], valid[u(st_.rng)]);
    }
    std::vector<Eigen::Vector3d> pts;
    std::vector<Eigen::Vector3f> cols;
    for (std::size_t k = 0; k < take; ++k) {
      const int x = static_cast<int>(valid[k] % kf.depth.width);
      const int y = static_cast<int>(valid[k] / kf.depth.width);
      const auto p = deproject_pixel(x, y, kf.depth.data[valid[k]], kf.camera);
      if (!p) continue;
      pts.push_back(*p);
      const float* c = kf.image.pixel(x, y);
      cols.emplace_back(c[0], c[1], c[2]);
    }
    if (pts.empty()) return;
    if (st_.scene_extent <= 0) {
      Eigen::Vector3d lo = pts[0], hi = pts[0];
      for (const auto& p : pts) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
      }
      st_.scene_extent = std::max(0.5 * (hi - lo).norm(), 1e-3);
    }
    const auto spacing = nearest_neighbor_spacing(pts);
    const float opacity_logit = static_cast<float>(logit(0.1));
    for (std::size_t k = 0; k < pts.size(); ++k) {
      Gaussian<float> g;
      g.mean = pts[k].cast<float>();
      g.log_scale = Vec3<float>::Constant(static_cast<float>(std::log(spacing[k])));
      g.opacity_logit = opacity_logit;
      g.color = cols[k];
      g.anchor_keyframe = kf.seq;
      st_.gaussians.push_back(g);
    }
  }

  /// Mean distance from each new sample to its three nearest neighbours among
  /// the other new samples and the existing cloud, floored at 0.1 mm. Exact
  /// k-nearest search over a voxel hash whose cell is sized from the new
  /// samples' bounding box.
  std::vector<double> nearest_neighbor_spacing(const std::vector<Eigen::Vector3d>& pts) const {
    const auto& g = st_.gaussians;
    const std::size_t n = pts.size();
    std::vector<double> out(n, 0.01);
    if (n + g.size() < 2) return out;

    std::vector<Eigen::Vector3d> all = pts;
    all.reserve(n + g.size());
    for (std::size_t j = 0; j < g.size(); ++j) all.push_back(g.mean(j).template cast<double>());
    Eigen::Vector3d lo = pts[0], hi = pts[0];
    for (const auto& p : pts) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    // Roughly a few samples per cell if the new points cover a surface patch.
    const double cell = std::max((hi - lo).norm() / std::sqrt(static_cast<double>(n)), 1e-3);
    using Key = std::array<std::int64_t, 3>;
    auto key_of = [&](const Eigen::Vector3d& p) {
      return Key{static_cast<std::int64_t>(std::floor(p.x() / cell)), static_cast<std::int64_t>(std::floor(p.y() / cell)),
                 static_cast<std::int64_t>(std::floor(p.z() / cell))};
    };
    std::map<Key, std::vector<std::uint32_t>> grid;
    for (std::uint32_t j = 0; j < all.size(); ++j) grid[key_of(all[j])].push_back(j);

    for (std::size_t i = 0; i < n; ++i) {
      std::array<double, 3> best{HUGE_VAL, HUGE_VAL, HUGE_VAL};  // ascending squared distances
      auto offer = [&](double d2) {
        if (d2 >= best[2]) return;
        best[2] = d2;
        if (best[2] < best[1]) std::swap(best[1], best[2]);
        if (best[1] < best[0]) std::swap(best[0], best[1]);
      };
      const Key c = key_of(pts[i]);
      // Shell r covers every point within r * cell of pts[i]; stop once the
      // third-best distance lies inside the searched radius.
      for (std::int64_t r = 0;; ++r) {
        for (std::int64_t dx = -r; dx <= r; ++dx)
          for (std::int64_t dy = -r; dy <= r; ++dy)
            for (std::int64_t dz = -r; dz <= r; ++dz) {
              if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
              const auto it = grid.find(Key{c[0] + dx, c[1] + dy, c[2] + dz});
              if (it == grid.end()) continue;
              for (std::uint32_t j : it->second)
                if (j != i) offer((pts[i] - all[j]).squaredNorm());
            }
        const double reach = static_cast<double>(r) * cell;
        if (best[2] <= reach * reach || r > 64) break;
      }
      double acc = 0;
      int k = 0;
      for (double d2 : best)
        if (d2 < HUGE_VAL) {
          acc += std::sqrt(d2);
          ++k;
        }
      out[i] = k ? std::max(acc / k, 1e-4) : 0.01;
    }
    return out;
  }

  static void remap_moments(AdamMoments<float>& m, const std::vector<std::int64_t>& source, int width) {
    if (m.m.empty()) return;
    std::vector<float> nm(source.size() * width, 0.0f), nv(source.size() * width, 0.0f);
    for (std::size_t k = 0; k < source.size(); ++k) {
      if (source[k] < 0) continue;
      const std::size_t s = static_cast<std::size_t>(source[k]) * width;
      if (s + width > m.m.size()) continue;
      for (int j = 0; j < width; ++j) {
        nm[k * width + j] = m.m[s + j];
        nv[k * width + j] = m.v[s + j];
      }
    }
    m.m = std::move(nm);
    m.v = std::move(nv);
  }

  double sample_scale() {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double t = u(st_.lang_rng);
    const double lo = field_cfg_.scale_min, hi = field_cfg_.scale_max;
    if (cfg_.scale_sampling == ScaleSampling::uniform) return lo + t * (hi - lo);
    return lo * std::pow(hi / lo, t);
  }

  /// Unit target vectors at scale s, interpolated log-linearly between the
  /// two bracketing pyramid levels.
  static std::vector<float> target_at_scale(const TrainView& v, double s, int dim) {
    const auto& t = v.targets;
    std::size_t hi = 0;
    while (hi < t.size() && t[hi].scale < s) ++hi;
    std::size_t lo = hi == 0 ? 0 : hi - 1;
    if (hi == t.size()) hi = lo;
    double w = 0.0;
    if (hi != lo) w = std::log(s / t[lo].scale) / std::log(double(t[hi].scale) / t[lo].scale);
    const auto& a = t[lo];
    const auto& b = t[hi];
    std::vector<float> out(a.data.size());
    for (std::size_t p = 0; p < a.count(); ++p) {
      double sq = 0;
      for (int k = 0; k < dim; ++k) {
        const double x = (1 - w) * a.data[p * dim + k] + w * b.data[p * dim + k];
        out[p * dim + k] = static_cast<float>(x);
        sq += x * x;
      }
      const double inv = sq > 0 ? 1.0 / std::sqrt(sq) : 0.0;
      for (int k = 0; k < dim; ++k) out[p * dim + k] = static_cast<float>(out[p * dim + k] * inv);
    }
    return out;
  }

  /// Language term on the target grid resolution. Only the Gaussians that
  /// contribute to that render are evaluated; gradients (already weighted by
  /// lambda_lang) reach the field only.
  double language_step(const TrainView& view, FieldGradients<float>& fg, double& scale_out) {
    const LangField<float>& field = *st_.field;
    const int dim = field.dim();
    const double s = sample_scale();
    scale_out = s;
    const auto& level = view.targets.front();
    for (const auto& r : view.targets)
      if (r.rows != level.rows || r.cols != level.cols)
        throw DataError("keyframe seq " + std::to_string(view.seq) + ": target grids differ in size");
    const PinholeCamera cam = view.camera.resized(static_cast<int>(level.cols), static_cast<int>(level.rows));
    const std::vector<float> target = target_at_scale(view, s, dim);

    std::vector<std::uint8_t> used;
    render<float>(st_.gaussians, cam, RenderMode::depth, {}, {}, &used);
    std::vector<std::uint32_t> subset;
    for (std::uint32_t i = 0; i < used.size(); ++i)
      if (used[i]) subset.push_back(i);
    fg.zero(field.tables().size(), field.mlp_params().size());
    if (subset.empty()) return 0.0;
    const GaussianCloud<float> sub = st_.gaussians.select(subset);
    const FieldBatch<float> batch = field.forward(sub.means, s);
    const FeatureRows<float> rows{batch.rows(), dim};
    const auto fwd = render<float>(sub, cam, RenderMode::feature, {}, rows);

    ImageT<float> grad(cam.width, cam.height, dim);
    double loss = 0;
    std::size_t supervised = 0;
    for (std::size_t p = 0; p < fwd.image.pixel_count(); ++p) {
      const float* f = &fwd.image.data[p * dim];
      double nrm = 0;
      for (int k = 0; k < dim; ++k) nrm += double(f[k]) * f[k];
      nrm = std::sqrt(nrm);
      if (nrm < 1e-8) continue;
      ++supervised;
    }
    if (supervised == 0) return 0.0;
    const double inv_count = 1.0 / static_cast<double>(supervised);
    const double weight = cfg_.lambda_lang * inv_count;
    for (std::size_t p = 0; p < fwd.image.pixel_count(); ++p) {
      const float* f = &fwd.image.data[p * dim];
      const float* t = &target[p * dim];
      double nrm = 0, dot = 0;
      for (int k = 0; k < dim; ++k) {
        nrm += double(f[k]) * f[k];
        dot += double(f[k]) * t[k];
      }
      nrm = std::sqrt(nrm);
      if (nrm < 1e-8) continue;
      const double cosine = dot / nrm;
      loss += 1.0 - cosine;
      float* gp = &grad.data[p * dim];
      for (int k = 0; k < dim; ++k)
        gp[k] = static_cast<float>(-(t[k] - cosine * f[k] / nrm) / nrm * weight);
    }
    const auto back = render_backward<float>(sub, fwd, grad, rows);
    field.backward(batch, back.features, fg);
    return loss * inv_count;
  }

  TrainConfig cfg_;
  LangFieldConfig field_cfg_;
  Warn warn_;
  AdamConfig adam_;
  TrainerState st_;
};

}  // namespace legs
