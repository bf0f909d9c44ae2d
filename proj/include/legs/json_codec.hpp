#pragma once

// JSON encodings of poses and cameras shared by the manifest, annotation,
// sidecar and camera files.

#include <json.hpp>

#include <string>

#include "legs/errors.hpp"
#include "legs/geom.hpp"

namespace legs {

using Json = nlohmann::json;

inline Json pose_to_json(const Se3Pose& p) {
  const auto q = p.wxyz();
  return Json{{"t", {p.translation.x(), p.translation.y(), p.translation.z()}},
              {"q", {q[0], q[1], q[2], q[3]}}};
}

namespace detail {

inline const Json& require(const Json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
  return j.at(key);
}

inline double number(const Json& j, const char* key, const std::string& where) {
  const Json& v = require(j, key, where);
  if (!v.is_number()) throw DataError(where + ": field '" + key + "' must be a number");
  return v.get<double>();
}

template <std::size_t N>
std::array<double, N> number_array(const Json& j, const char* key, const std::string& where) {
  const Json& v = require(j, key, where);
  if (!v.is_array() || v.size() != N)
    throw DataError(where + ": field '" + key + "' must be an array of " + std::to_string(N) +
                    " numbers");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!v[i].is_number()) throw DataError(where + ": field '" + key + "' must hold numbers");
    out[i] = v[i].get<double>();
  }
  return out;
}

}  // namespace detail

inline Se3Pose pose_from_json(const Json& j, const std::string& where) {
  const auto t = detail::number_array<3>(j, "t", where);
  const auto q = detail::number_array<4>(j, "q", where);
  const double n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
  if (!(n2 > 1e-12) || !std::isfinite(n2)) throw DataError(where + ": degenerate quaternion");
  Se3Pose p = Se3Pose::from_wxyz(t, q);
  // Already-unit quaternions are kept verbatim so write/read is bit-exact.
  if (std::abs(n2 - 1.0) < 1e-14) p.rotation = Eigen::Quaterniond(q[0], q[1], q[2], q[3]);
  return p;
}

inline Json intrinsics_to_json(const PinholeCamera& c) {
  return Json{{"fx", c.fx}, {"fy", c.fy},         {"cx", c.cx},
              {"cy", c.cy}, {"width", c.width}, {"height", c.height}};
}

inline void intrinsics_from_json(const Json& j, PinholeCamera& c, const std::string& where) {
  c.fx = detail::number(j, "fx", where);
  c.fy = detail::number(j, "fy", where);
  c.cx = detail::number(j, "cx", where);
  c.cy = detail::number(j, "cy", where);
  c.width = static_cast<int>(detail::number(j, "width", where));
  c.height = static_cast<int>(detail::number(j, "height", where));
  try {
    c.validate();
  } catch (const Error& e) {
    throw DataError(where + ": " + e.what());
  }
}

/// Camera file: {"intrinsics": {...}, "pose": {"t": [..], "q": [w, x, y, z]}}.
inline Json camera_to_json(const PinholeCamera& c) {
  return Json{{"intrinsics", intrinsics_to_json(c)}, {"pose", pose_to_json(c.pose)}};
}

inline PinholeCamera camera_from_json(const Json& j, const std::string& where) {
  PinholeCamera c;
  intrinsics_from_json(detail::require(j, "intrinsics", where), c, where);
  c.pose = pose_from_json(detail::require(j, "pose", where), where);
  return c;
}

}  // namespace legs
