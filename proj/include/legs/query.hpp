#pragma once

// Open-vocabulary queries against a trained snapshot: relevancy against
// negatives, scale search over Gaussian means, relevancy maps and the
// projected-point-in-box recall protocol.

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "legs/embeddings.hpp"
#include "legs/errors.hpp"
#include "legs/json_codec.hpp"
#include "legs/rasterizer.hpp"
#include "legs/snapshot.hpp"

namespace legs {

inline constexpr int kDefaultScaleCount = 16;
inline constexpr double kQueryNormTolerance = 1e-3;

using Embedding = Eigen::VectorXd;

/// Log-spaced scales across [lo, hi], endpoints included.
inline std::vector<double> log_scale_grid(double lo, double hi, int count = kDefaultScaleCount) {
  if (!(lo > 0 && hi >= lo) || count < 1) throw ConfigError("scale grid needs 0 < lo <= hi and count >= 1");
  std::vector<double> s;
  for (int i = 0; i < count; ++i)
    s.push_back(count == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(i) / (count - 1)));
  return s;
}

struct QuerySpec {
  std::string name;
  Embedding embedding;
  std::vector<Embedding> negatives;
  std::vector<double> scales;

  void validate() const {
    auto unit = [](const Embedding& v) { return std::abs(v.norm() - 1.0) <= kQueryNormTolerance; };
    if (embedding.size() == 0 || !unit(embedding)) throw DataError("query '" + name + "' is not a unit vector");
    if (negatives.empty()) throw DataError("query '" + name + "' needs at least one negative");
    for (const auto& n : negatives)
      if (n.size() != embedding.size() || !unit(n))
        throw DataError("negatives must be unit vectors of the query dimension");
    if (scales.empty()) throw DataError("query '" + name + "' needs at least one scale");
  }
};

/// min_i exp(phi.q) / (exp(phi.q) + exp(phi.n_i)), written as a logistic of
/// the score gap so it never overflows.
template <typename Vec>
double relevancy(const Vec& phi, const QuerySpec& q) {
  const double pos = phi.template cast<double>().dot(q.embedding);
  double best = 1.0;
  for (const auto& n : q.negatives) {
    const double neg = phi.template cast<double>().dot(n);
    best = std::min(best, 1.0 / (1.0 + std::exp(neg - pos)));
  }
  return best;
}

struct RelevancyResult {
  std::vector<double> relevancy;    // best over scales; NaN for gated Gaussians
  std::vector<double> best_scale;   // metres; NaN for gated Gaussians
  std::size_t argmax = 0;
  Eigen::Vector3d point = Eigen::Vector3d::Zero();

  double max_relevancy() const { return relevancy[argmax]; }
  double argmax_scale() const { return best_scale[argmax]; }
};

namespace detail {

inline bool passes_opacity_gate(const SceneSnapshot& s, std::size_t i) {
  return sigmoid(static_cast<double>(s.gaussians.opacity_logits[i])) >= s.prune_opacity;
}

}  // namespace detail

/// Scores every Gaussian mean at every scale. The argmax ignores Gaussians
/// below the opacity gate and breaks ties toward the lowest index.
inline RelevancyResult localize(const SceneSnapshot& snap, const QuerySpec& q) {
  q.validate();
  if (!snap.has_field) throw DataError("snapshot has no language field");
  if (q.embedding.size() != snap.field.dim())
    throw DataError("query dimension " + std::to_string(q.embedding.size()) + " does not match field dimension " +
                    std::to_string(snap.field.dim()));
  const auto& g = snap.gaussians;
  const std::size_t n = g.size();
  if (n == 0) throw DataError("cannot localize in an empty scene");

  RelevancyResult out;
  out.relevancy.assign(n, std::numeric_limits<double>::quiet_NaN());
  out.best_scale.assign(n, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::uint32_t> live;
  for (std::size_t i = 0; i < n; ++i)
    if (detail::passes_opacity_gate(snap, i)) live.push_back(static_cast<std::uint32_t>(i));
  if (live.empty()) throw DataError("every Gaussian is below the opacity gate");

  constexpr std::size_t kChunk = 4096;
  for (std::size_t c0 = 0; c0 < live.size(); c0 += kChunk) {
    const std::size_t c1 = std::min(live.size(), c0 + kChunk);
    std::vector<float> means;
    means.reserve((c1 - c0) * 3);
    for (std::size_t k = c0; k < c1; ++k) {
      const auto m = g.mean(live[k]);
      means.insert(means.end(), {m.x(), m.y(), m.z()});
    }
    const MatX<float> z = snap.field.encode(means);
    for (double s : q.scales) {
      const FieldBatch<float> b = snap.field.forward_encoded(z, s);
      for (std::size_t k = c0; k < c1; ++k) {
        const double r = relevancy(b.output.col(static_cast<Eigen::Index>(k - c0)), q);
        double& best = out.relevancy[live[k]];
        if (std::isnan(best) || r > best) {
          best = r;
          out.best_scale[live[k]] = s;
        }
      }
    }
  }
  out.argmax = live.front();
  for (std::uint32_t i : live)
    if (out.relevancy[i] > out.relevancy[out.argmax]) out.argmax = i;
  out.point = g.mean(out.argmax).cast<double>();
  return out;
}

/// Per-pixel relevancy: the per-Gaussian best scores alpha-blended and
/// divided by accumulated opacity, so values stay in [0, 1]. Pixels nothing
/// covers are 0.
inline Image render_relevancy_map(const SceneSnapshot& snap, const PinholeCamera& cam, const RelevancyResult& r) {
  std::vector<std::uint32_t> live;
  for (std::uint32_t i = 0; i < snap.gaussians.size(); ++i)
    if (!std::isnan(r.relevancy[i])) live.push_back(i);
  Image map(cam.width, cam.height, 1);
  if (live.empty()) return map;
  const GaussianCloud<float> sub = snap.gaussians.select(live);
  std::vector<float> rows;
  rows.reserve(live.size());
  for (std::uint32_t i : live) rows.push_back(static_cast<float>(r.relevancy[i]));
  const auto fwd = render<float>(sub, cam, RenderMode::feature, {}, FeatureRows<float>{rows, 1});
  for (std::size_t p = 0; p < map.pixel_count(); ++p) {
    const double coverage = 1.0 - fwd.final_transmittance[p];
    if (coverage > 1e-6) map.data[p] = static_cast<float>(std::clamp(fwd.image.data[p] / coverage, 0.0, 1.0));
  }
  return map;
}

/// Min-max stretch of a relevancy map for heatmap export.
inline Image stretch_for_export(const Image& map) {
  Image out = map;
  if (map.data.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.data.begin(), map.data.end());
  const float range = *hi - *lo;
  if (range <= 0) return out;
  for (auto& v : out.data) v = (v - *lo) / range;
  return out;
}

// ---------------------------------------------------------------------------
// Recall protocol
// ---------------------------------------------------------------------------

struct Annotation {
  std::string query;
  std::optional<std::size_t> query_index;  // row of the query record; list order when absent
  PinholeCamera camera;
  std::array<double, 4> box{};  // u_min, v_min, u_max, v_max (px)

  bool contains(double u, double v) const { return u >= box[0] && u <= box[2] && v >= box[1] && v <= box[3]; }
};

inline std::vector<Annotation> annotations_from_json(const Json& j, const std::string& where) {
  if (!j.is_array()) throw DataError(where + ": annotations must be a JSON list");
  std::vector<Annotation> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string at = where + "[" + std::to_string(i) + "]";
    const Json& a = j[i];
    Annotation ann;
    const Json& name = detail::require(a, "query", at);
    if (!name.is_string()) throw DataError(at + ": 'query' must be a string");
    ann.query = name.get<std::string>();
    if (a.contains("query_index")) ann.query_index = a["query_index"].get<std::size_t>();
    ann.camera = camera_from_json(detail::require(a, "camera", at), at);
    const auto box = detail::number_array<4>(a, "box", at);
    ann.box = {box[0], box[1], box[2], box[3]};
    if (!(ann.box[0] <= ann.box[2] && ann.box[1] <= ann.box[3] && ann.box[0] >= -0.5 && ann.box[1] >= -0.5 &&
          ann.box[2] <= ann.camera.width - 0.5 && ann.box[3] <= ann.camera.height - 0.5))
      throw DataError(at + ": box must be ordered and inside the image");
    out.push_back(std::move(ann));
  }
  return out;
}

inline std::vector<Annotation> read_annotations(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open annotations " + path);
  Json j;
  try {
    j = Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
  return annotations_from_json(j, path);
}

/// Unit vectors of a flat embedding record.
inline std::vector<Embedding> embedding_rows(const EmbeddingRecord& r, int dim) {
  std::vector<Embedding> out;
  for (std::size_t i = 0; i < r.count(); ++i)
    out.push_back(Eigen::Map<const Eigen::VectorXf>(r.vector(i, dim), dim).cast<double>());
  return out;
}

struct RecallEntry {
  std::string query;
  bool success = false;
  bool in_front = false;
  double u = 0, v = 0;
  double relevancy = 0;
  double scale = 0;
  std::size_t gaussian = 0;
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
};

struct RecallReport {
  std::vector<RecallEntry> entries;

  std::size_t successes() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.success;
    return n;
  }
  std::size_t total() const { return entries.size(); }
};

/// Builds one query per annotation from the query embedding rows.
inline std::vector<QuerySpec> queries_for(const std::vector<Annotation>& ann, const std::vector<Embedding>& rows,
                                          const std::vector<Embedding>& negatives, const std::vector<double>& scales) {
  std::vector<QuerySpec> out;
  for (std::size_t i = 0; i < ann.size(); ++i) {
    const std::size_t idx = ann[i].query_index.value_or(i);
    if (idx >= rows.size())
      throw DataError("annotation '" + ann[i].query + "' refers to query row " + std::to_string(idx) + " of " +
                      std::to_string(rows.size()));
    out.push_back({ann[i].query, rows[idx], negatives, scales});
  }
  return out;
}

/// The point counts only when it is in front of the annotation camera and
/// projects inside the box.
inline RecallEntry score_annotation(const Annotation& a, const RelevancyResult& r) {
  RecallEntry e;
  e.query = a.query;
  e.gaussian = r.argmax;
  e.point = r.point;
  e.relevancy = r.max_relevancy();
  e.scale = r.argmax_scale();
  const ProjectedPoint p = project_point(r.point, a.camera);
  e.in_front = p.in_front;
  if (p.in_front) {
    e.u = p.u;
    e.v = p.v;
  }
  e.success = p.in_front && a.contains(p.u, p.v);
  return e;
}

inline RecallReport eval_recall(const SceneSnapshot& snap, const std::vector<Annotation>& ann,
                                const std::vector<QuerySpec>& queries) {
  if (ann.size() != queries.size()) throw DataError("one query per annotation is required");
  RecallReport rep;
  for (std::size_t i = 0; i < ann.size(); ++i) rep.entries.push_back(score_annotation(ann[i], localize(snap, queries[i])));
  return rep;
}

inline Json recall_to_json(const RecallReport& r) {
  Json entries = Json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"query", e.query},
                       {"success", e.success},
                       {"in_front", e.in_front},
                       {"pixel", {e.u, e.v}},
                       {"relevancy", e.relevancy},
                       {"scale", e.scale},
                       {"gaussian", e.gaussian},
                       {"point", {e.point.x(), e.point.y(), e.point.z()}}});
  return {{"successes", r.successes()},
          {"total", r.total()},
          {"recall", std::to_string(r.successes()) + "/" + std::to_string(r.total())},
          {"queries", entries}};
}

/// Distance from a point to an axis-aligned box (0 inside).
inline double distance_to_aabb(const Eigen::Vector3d& p, const Eigen::Vector3d& lo, const Eigen::Vector3d& hi) {
  return (lo - p).cwiseMax(p - hi).cwiseMax(0.0).norm();
}

}  // namespace legs
