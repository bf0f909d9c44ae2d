#pragma once

// Keyframe streams on disk and the multi-camera rig.
//
// A stream is a directory holding manifest.jsonl plus the files it names.
// Each manifest line is either a keyframe
//   {"type":"keyframe","seq":..,"camera":..,"timestamp":..,"pose":{"t":[3],"q":[w,x,y,z]},
//    "intrinsics":{..},"image":"rgb/..png","depth":"depth/..png"[,"embeddings":"emb/..legsemb"]}
// or a bundle-adjustment event
//   {"event":"ba","trigger_seq":..,"corrections":[{"seq":..,"pose":{..}}, ..]}.
// Paths are relative to the stream directory.

#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "legs/bounded_queue.hpp"
#include "legs/errors.hpp"
#include "legs/geom.hpp"
#include "legs/json_codec.hpp"
#include "legs/png_io.hpp"

namespace legs {

namespace fs = std::filesystem;

inline constexpr const char* kManifestName = "manifest.jsonl";
inline constexpr const char* kHeldoutName = "heldout.jsonl";

// ---------------------------------------------------------------------------
// Rig
// ---------------------------------------------------------------------------

struct RigCamera {
  std::string id;
  PinholeCamera intrinsics;  // pose unused
  Se3Pose extrinsic;         // primary camera frame -> this camera frame
};

struct RigConfig {
  std::string primary;
  std::vector<RigCamera> cameras;

  const RigCamera& camera(const std::string& id) const {
    for (const auto& c : cameras)
      if (c.id == id) return c;
    throw ConfigError("unknown rig camera '" + id + "'");
  }

  void validate() const {
    if (cameras.empty()) throw ConfigError("rig has no cameras");
    std::map<std::string, int> seen;
    for (const auto& c : cameras) {
      if (c.id.empty()) throw ConfigError("rig camera id must not be empty");
      if (seen[c.id]++) throw ConfigError("duplicate rig camera id '" + c.id + "'");
      c.intrinsics.validate();
    }
    const RigCamera& p = camera(primary);
    if (p.extrinsic.translation.norm() > 1e-12 ||
        p.extrinsic.rotation.angularDistance(Eigen::Quaterniond::Identity()) > 1e-12)
      throw ConfigError("primary camera extrinsic must be the identity");
  }
};

/// Camera-to-world pose of one rig camera: primary_pose composed with the
/// camera's extrinsic.
inline Se3Pose rig_camera_pose(const Se3Pose& primary_pose, const RigConfig& rig,
                               const std::string& id) {
  return se3_compose(primary_pose, rig.camera(id).extrinsic);
}

inline std::map<std::string, Se3Pose> rig_expand(const Se3Pose& primary_pose, const RigConfig& rig) {
  std::map<std::string, Se3Pose> out;
  for (const auto& c : rig.cameras) out[c.id] = se3_compose(primary_pose, c.extrinsic);
  return out;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct Keyframe {
  std::uint64_t seq = 0;
  std::string camera_id;
  double timestamp = 0.0;
  PinholeCamera camera;  // intrinsics and camera-to-world pose
  std::string image_file, depth_file, embeddings_file;
  Image image, depth;  // metres, 0 = invalid; empty until loaded

  bool has_images() const { return !image.data.empty(); }
};

struct PoseCorrection {
  std::uint64_t seq = 0;
  Se3Pose pose;
};

struct PoseUpdateEvent {
  std::uint64_t trigger_seq = 0;
  std::vector<PoseCorrection> corrections;
};

using StreamRecord = std::variant<Keyframe, PoseUpdateEvent>;

inline Json record_to_json(const StreamRecord& r) {
  if (const auto* kf = std::get_if<Keyframe>(&r)) {
    Json j{{"type", "keyframe"},
           {"seq", kf->seq},
           {"camera", kf->camera_id},
           {"timestamp", kf->timestamp},
           {"pose", pose_to_json(kf->camera.pose)},
           {"intrinsics", intrinsics_to_json(kf->camera)},
           {"image", kf->image_file},
           {"depth", kf->depth_file}};
    if (!kf->embeddings_file.empty()) j["embeddings"] = kf->embeddings_file;
    return j;
  }
  const auto& ev = std::get<PoseUpdateEvent>(r);
  Json corr = Json::array();
  for (const auto& c : ev.corrections) corr.push_back({{"seq", c.seq}, {"pose", pose_to_json(c.pose)}});
  return Json{{"event", "ba"}, {"trigger_seq", ev.trigger_seq}, {"corrections", corr}};
}

namespace detail {

inline std::uint64_t seq_field(const Json& j, const char* key, const std::string& where) {
  const Json& v = require(j, key, where);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    throw DataError(where + ": '" + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

inline std::string string_field(const Json& j, const char* key, const std::string& where) {
  const Json& v = require(j, key, where);
  if (!v.is_string()) throw DataError(where + ": '" + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline StreamRecord record_from_json(const Json& j, const std::string& where) {
  if (!j.is_object()) throw DataError(where + ": record must be a JSON object");
  if (j.contains("event")) {
    if (j.at("event") != "ba") throw DataError(where + ": unknown event type");
    PoseUpdateEvent ev;
    ev.trigger_seq = detail::seq_field(j, "trigger_seq", where);
    const Json& corr = detail::require(j, "corrections", where);
    if (!corr.is_array()) throw DataError(where + ": 'corrections' must be an array");
    for (const auto& c : corr) {
      PoseCorrection pc{detail::seq_field(c, "seq", where),
                        pose_from_json(detail::require(c, "pose", where), where)};
      if (pc.seq > ev.trigger_seq)
        throw DataError(where + ": correction for seq " + std::to_string(pc.seq) +
                        " is newer than trigger_seq " + std::to_string(ev.trigger_seq));
      ev.corrections.push_back(pc);
    }
    return ev;
  }
  if (!j.contains("type") || j.at("type") != "keyframe")
    throw DataError(where + ": record is neither a keyframe nor an event");
  Keyframe kf;
  kf.seq = detail::seq_field(j, "seq", where);
  kf.camera_id = detail::string_field(j, "camera", where);
  kf.timestamp = detail::number(j, "timestamp", where);
  intrinsics_from_json(detail::require(j, "intrinsics", where), kf.camera, where);
  kf.camera.pose = pose_from_json(detail::require(j, "pose", where), where);
  kf.image_file = detail::string_field(j, "image", where);
  kf.depth_file = detail::string_field(j, "depth", where);
  if (j.contains("embeddings")) kf.embeddings_file = detail::string_field(j, "embeddings", where);
  return kf;
}

/// Parses a manifest (metadata only, no images). Enforces strictly
/// increasing keyframe seqs. Errors carry "file:line".
inline std::vector<StreamRecord> read_manifest(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open manifest " + file.string());
  std::vector<StreamRecord> out;
  std::string line;
  std::optional<std::uint64_t> last_seq;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = file.string() + ":" + std::to_string(lineno);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw DataError(where + ": malformed JSON (" + e.what() + ")");
    }
    StreamRecord r = record_from_json(j, where);
    if (const auto* kf = std::get_if<Keyframe>(&r)) {
      if (last_seq && kf->seq <= *last_seq)
        throw DataError(where + ": keyframe seq " + std::to_string(kf->seq) +
                        " is not greater than previous seq " + std::to_string(*last_seq));
      last_seq = kf->seq;
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_manifest(const fs::path& file, const std::vector<StreamRecord>& records) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw DataError("cannot write manifest " + file.string());
  for (const auto& r : records) os << record_to_json(r).dump() << '\n';
  if (!os) throw DataError("failed writing manifest " + file.string());
}

/// Loads a keyframe's colour and depth images from the stream directory.
inline void load_keyframe_images(const fs::path& dir, Keyframe& kf) {
  const fs::path img = dir / kf.image_file, dep = dir / kf.depth_file;
  for (const auto& p : {img, dep})
    if (!fs::exists(p))
      throw DataError("keyframe seq " + std::to_string(kf.seq) + ": missing file " + p.string());
  kf.image = read_png_rgb(img.string());
  kf.depth = read_depth_png(dep.string());
  for (const Image* im : {&kf.image, &kf.depth})
    if (im->width != kf.camera.width || im->height != kf.camera.height)
      throw DataError("keyframe seq " + std::to_string(kf.seq) + ": image is " +
                      std::to_string(im->width) + "x" + std::to_string(im->height) +
                      " but intrinsics say " + std::to_string(kf.camera.width) + "x" +
                      std::to_string(kf.camera.height));
}

/// Reads a whole stream (images loaded) in manifest order.
inline std::vector<StreamRecord> read_stream(const fs::path& dir, const char* manifest = kManifestName) {
  auto records = read_manifest(dir / manifest);
  for (auto& r : records)
    if (auto* kf = std::get_if<Keyframe>(&r)) load_keyframe_images(dir, *kf);
  return records;
}

/// Writes the manifest and the images of every keyframe that has them.
inline void write_stream(const fs::path& dir, const std::vector<StreamRecord>& records,
                         const char* manifest = kManifestName) {
  fs::create_directories(dir);
  for (const auto& r : records) {
    const auto* kf = std::get_if<Keyframe>(&r);
    if (!kf || !kf->has_images()) continue;
    for (const auto& f : {kf->image_file, kf->depth_file})
      fs::create_directories((dir / f).parent_path());
    write_png((dir / kf->image_file).string(), kf->image);
    write_depth_png((dir / kf->depth_file).string(), kf->depth);
  }
  write_manifest(dir / manifest, records);
}

/// Lazily loading reader over a stream directory.
class StreamReader {
 public:
  explicit StreamReader(fs::path dir, const char* manifest = kManifestName)
      : dir_(std::move(dir)), records_(read_manifest(dir_ / manifest)) {}

  std::size_t size() const { return records_.size(); }
  std::size_t position() const { return next_; }
  void seek(std::size_t pos) { next_ = std::min(pos, records_.size()); }
  const fs::path& dir() const { return dir_; }

  std::optional<StreamRecord> next() {
    if (next_ >= records_.size()) return std::nullopt;
    StreamRecord r = records_[next_++];
    if (auto* kf = std::get_if<Keyframe>(&r)) load_keyframe_images(dir_, *kf);
    return r;
  }

 private:
  fs::path dir_;
  std::vector<StreamRecord> records_;
  std::size_t next_ = 0;
};

/// Feeds `reader` into `queue` in manifest order, then closes the queue. Any
/// error is stored in `error` and also closes the queue.
inline void produce_stream(StreamReader& reader, BoundedQueue<StreamRecord>& queue,
                           std::exception_ptr& error) {
  try {
    while (auto r = reader.next())
      if (!queue.push(std::move(*r))) break;
  } catch (...) {
    error = std::current_exception();
  }
  queue.close();
}

}  // namespace legs
