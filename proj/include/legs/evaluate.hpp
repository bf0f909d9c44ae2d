#pragma once

// Whole-run evaluation against a synthetic stream's ground truth: held-out
// PSNR, projected-point recall and 3D localization error.

#include <fstream>
#include <map>

#include "legs/embeddings.hpp"
#include "legs/query.hpp"
#include "legs/snapshot.hpp"
#include "legs/stream.hpp"

namespace legs {

struct GroundTruth {
  Eigen::Vector3d room_min, room_max;
  std::map<std::string, std::pair<Eigen::Vector3d, Eigen::Vector3d>> objects;  // name -> AABB
};

inline GroundTruth read_ground_truth(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open ground truth " + file.string());
  Json j;
  try {
    j = Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw DataError(file.string() + ": " + e.what());
  }
  const std::string where = file.string();
  auto vec = [&](const Json& o, const char* key) {
    const auto a = detail::number_array<3>(o, key, where);
    return Eigen::Vector3d(a[0], a[1], a[2]);
  };
  GroundTruth gt;
  gt.room_min = vec(j, "room_min");
  gt.room_max = vec(j, "room_max");
  for (const auto& o : detail::require(j, "objects", where))
    gt.objects[detail::require(o, "name", where).get<std::string>()] = {vec(o, "aabb_min"), vec(o, "aabb_max")};
  return gt;
}

struct RunReport {
  std::optional<double> heldout_psnr;
  RecallReport recall;
  std::vector<double> localization_error;  // per recall entry; NaN when the object is unknown
  std::uint64_t iteration = 0;
  std::size_t gaussians = 0;

  double mean_localization_error() const {
    double acc = 0;
    std::size_t n = 0;
    for (double e : localization_error)
      if (!std::isnan(e)) {
        acc += e;
        ++n;
      }
    return n ? acc / n : std::numeric_limits<double>::quiet_NaN();
  }
};

struct EvalInputs {
  std::vector<Keyframe> heldout;
  std::vector<Annotation> annotations;
  std::vector<Embedding> query_rows;
  std::vector<Embedding> negatives;
  std::optional<GroundTruth> truth;
};

/// Loads held-out views, annotations, queries (record 0) and negatives
/// (record 1 of the query file unless a separate file is given) from a
/// stream directory.
inline EvalInputs load_eval_inputs(const fs::path& stream_dir, int dim, const std::string& negatives_file = "") {
  EvalInputs in;
  if (fs::exists(stream_dir / kHeldoutName))
    for (auto& r : read_stream(stream_dir, kHeldoutName))
      if (auto* kf = std::get_if<Keyframe>(&r)) in.heldout.push_back(std::move(*kf));
  in.annotations = read_annotations((stream_dir / "annotations.json").string());
  const auto q = read_embeddings((stream_dir / "queries.legsemb").string(), dim);
  if (q.records.empty()) throw DataError("query file has no records");
  in.query_rows = embedding_rows(q.records[0], dim);
  if (!negatives_file.empty()) {
    const auto n = read_embeddings(negatives_file, dim);
    for (const auto& r : n.records)
      for (auto& e : embedding_rows(r, dim)) in.negatives.push_back(std::move(e));
  } else if (q.records.size() > 1) {
    in.negatives = embedding_rows(q.records[1], dim);
  }
  if (fs::exists(stream_dir / "gt.json")) in.truth = read_ground_truth(stream_dir / "gt.json");
  return in;
}

inline RunReport evaluate_run(const SceneSnapshot& snap, const EvalInputs& in, const std::vector<double>& scales) {
  RunReport rep;
  rep.iteration = snap.iteration;
  rep.gaussians = snap.gaussians.size();
  if (!in.heldout.empty()) {
    double acc = 0;
    for (const auto& v : in.heldout)
      acc += psnr(render<float>(snap.gaussians, v.camera, RenderMode::color, snap.background).image, v.image);
    rep.heldout_psnr = acc / static_cast<double>(in.heldout.size());
  }
  if (snap.has_field && !in.annotations.empty()) {
    rep.recall = eval_recall(snap, in.annotations, queries_for(in.annotations, in.query_rows, in.negatives, scales));
    for (const auto& e : rep.recall.entries) {
      double err = std::numeric_limits<double>::quiet_NaN();
      if (in.truth) {
        const auto it = in.truth->objects.find(e.query);
        if (it != in.truth->objects.end()) err = distance_to_aabb(e.point, it->second.first, it->second.second);
      }
      rep.localization_error.push_back(err);
    }
  }
  return rep;
}

inline Json report_to_json(const RunReport& r) {
  Json j{{"iteration", r.iteration}, {"gaussians", r.gaussians}};
  j["heldout_psnr"] = r.heldout_psnr ? Json(*r.heldout_psnr) : Json();
  j["recall"] = recall_to_json(r.recall);
  Json errs = Json::array();
  for (double e : r.localization_error) errs.push_back(std::isnan(e) ? Json() : Json(e));
  for (std::size_t i = 0; i < errs.size(); ++i) j["recall"]["queries"][i]["localization_error_m"] = errs[i];
  const double mean = r.mean_localization_error();
  j["mean_localization_error_m"] = std::isnan(mean) ? Json() : Json(mean);
  return j;
}

}  // namespace legs
