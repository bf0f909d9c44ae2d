#pragma once

#include <memory>

#include "legs/geom.hpp"
#include "legs/lang_field.hpp"

namespace legs {

/// Immutable view of a trained scene for rendering and querying.
struct SceneSnapshot {
  GaussianCloud<float> gaussians;
  LangField<float> field;
  bool has_field = false;
  double prune_opacity = 0.005;  // Gaussians below this opacity are ignored by queries
  std::array<float, 3> background = {0.0f, 0.0f, 0.0f};
  std::uint64_t iteration = 0;
};

using SnapshotPtr = std::shared_ptr<const SceneSnapshot>;

}  // namespace legs
