#pragma once

// Training checkpoints.
//
//   "LEGSCKP1" u32 version=1, then tagged sections, each
//   char[4] tag, u64 payload bytes, payload:
//     CONF  string run-config TOML, u64 iteration, u64 stream cursor,
//           string rng, string lang_rng, u64 scene-extent bits
//     GAUS  u64 n, f32 means[3n] log_scales[3n] rotations[4n] opacity[n]
//           colors[3n], u64 anchors[n]
//     FELD  u8 present; if present: f32_array tables, f32_array mlp,
//           u64 scale-clamp count
//     OPTM  per group (5 Gaussian groups, hash tables, MLP):
//           u64 step, f32_array m, f32_array v
//     GACC  f32_array grad_accum, f32_array grad_count
//
// Views are not stored: resuming replays the first `cursor` stream records
// for their poses.

#include <bit>
#include <fstream>
#include <sstream>

#include "legs/binary_io.hpp"
#include "legs/config.hpp"
#include "legs/trainer.hpp"

namespace legs {

inline constexpr char kCheckpointMagic[8] = {'L', 'E', 'G', 'S', 'C', 'K', 'P', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::string config_toml;
  std::uint64_t cursor = 0;  // stream records consumed
  TrainerState state;        // views empty
  std::uint64_t scale_clamp_count = 0;
};

namespace detail {

inline constexpr std::uint64_t kMaxCheckpointArray = 1ull << 34;

template <typename Fn>
void put_section(std::ostream& os, const char (&tag)[5], Fn&& body) {
  std::ostringstream payload(std::ios::binary);
  body(payload);
  const std::string bytes = payload.str();
  bin::put_bytes(os, tag, 4);
  bin::put_u64(os, bytes.size());
  bin::put_bytes(os, bytes.data(), bytes.size());
}

inline void put_moments(std::ostream& os, const AdamMoments<float>& m) {
  bin::put_u64(os, m.step);
  bin::put_f32_array(os, m.m);
  bin::put_f32_array(os, m.v);
}

inline AdamMoments<float> get_moments(bin::Reader& r) {
  AdamMoments<float> m;
  m.step = r.u64();
  m.m = r.f32_array(kMaxCheckpointArray);
  m.v = r.f32_array(kMaxCheckpointArray);
  if (m.m.size() != m.v.size()) throw DataError(r.what() + ": optimizer moment sizes differ");
  return m;
}

template <typename Rng>
std::string rng_text(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

template <typename Rng>
void rng_from_text(Rng& rng, const std::string& text, const std::string& where) {
  std::istringstream is(text);
  is >> rng;
  if (!is) throw DataError(where + ": corrupt RNG state");
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Trainer& trainer, const RunConfig& rc,
                            std::uint64_t cursor) {
  const TrainerState& st = trainer.state();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint " + path);
    bin::put_bytes(os, kCheckpointMagic, 8);
    bin::put_u32(os, kCheckpointVersion);
    detail::put_section(os, "CONF", [&](std::ostream& s) {
      bin::put_string(s, run_config_to_toml(rc));
      bin::put_u64(s, st.iteration);
      bin::put_u64(s, cursor);
      bin::put_string(s, detail::rng_text(st.rng));
      bin::put_string(s, detail::rng_text(st.lang_rng));
      bin::put_u64(s, std::bit_cast<std::uint64_t>(st.scene_extent));
    });
    detail::put_section(os, "GAUS", [&](std::ostream& s) {
      const auto& g = st.gaussians;
      bin::put_u64(s, g.size());
      bin::put_f32s(s, g.means);
      bin::put_f32s(s, g.log_scales);
      bin::put_f32s(s, g.rotations);
      bin::put_f32s(s, g.opacity_logits);
      bin::put_f32s(s, g.colors);
      for (std::uint64_t a : g.anchors) bin::put_u64(s, a);
    });
    detail::put_section(os, "FELD", [&](std::ostream& s) {
      bin::put_u8(s, st.field ? 1 : 0);
      if (!st.field) return;
      bin::put_f32_array(s, st.field->tables());
      bin::put_f32_array(s, st.field->mlp_params());
      bin::put_u64(s, st.field->scale_clamp_count());
    });
    detail::put_section(os, "OPTM", [&](std::ostream& s) {
      for (const auto& m : st.moments) detail::put_moments(s, m);
      detail::put_moments(s, st.table_moments);
      detail::put_moments(s, st.mlp_moments);
    });
    detail::put_section(os, "GACC", [&](std::ostream& s) {
      bin::put_f32_array(s, st.grad_accum);
      bin::put_f32_array(s, st.grad_count);
    });
    if (!os.flush()) throw DataError("cannot write checkpoint " + path);
  }
  fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  bin::Reader top(is, path);
  char magic[8];
  top.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError(path + ": not a checkpoint (bad magic)");
  const std::uint32_t version = top.u32();
  if (version != kCheckpointVersion)
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  std::map<std::string, std::string> sections;
  while (is.peek() != std::char_traits<char>::eof()) {
    char tag[4];
    top.bytes(tag, 4);
    const std::uint64_t n = top.u64();
    if (n > detail::kMaxCheckpointArray) throw DataError(path + ": section too large");
    std::string bytes(n, '\0');
    top.bytes(bytes.data(), n);
    sections[std::string(tag, 4)] = std::move(bytes);
  }
  auto section = [&](const char* tag) -> std::istringstream {
    const auto it = sections.find(tag);
    if (it == sections.end()) throw DataError(path + ": missing " + tag + " section");
    return std::istringstream(it->second, std::ios::binary);
  };

  {
    auto s = section("CONF");
    bin::Reader r(s, path + " CONF");
    ck.config_toml = r.string();
    ck.config = parse_run_config(ck.config_toml, path + " (embedded config)");
    ck.state.iteration = r.u64();
    ck.cursor = r.u64();
    detail::rng_from_text(ck.state.rng, r.string(), path);
    detail::rng_from_text(ck.state.lang_rng, r.string(), path);
    ck.state.scene_extent = std::bit_cast<double>(r.u64());
  }
  {
    auto s = section("GAUS");
    bin::Reader r(s, path + " GAUS");
    const std::uint64_t n = r.u64();
    if (n > (1ull << 30)) throw DataError(path + ": implausible Gaussian count");
    auto& g = ck.state.gaussians;
    g.means = r.f32s(3 * n);
    g.log_scales = r.f32s(3 * n);
    g.rotations = r.f32s(4 * n);
    g.opacity_logits = r.f32s(n);
    g.colors = r.f32s(3 * n);
    g.anchors.resize(n);
    for (auto& a : g.anchors) a = r.u64();
  }
  {
    auto s = section("FELD");
    bin::Reader r(s, path + " FELD");
    if (r.u8()) {
      LangField<float> f(ck.config.field, 0);
      auto tables = r.f32_array(detail::kMaxCheckpointArray);
      auto mlp = r.f32_array(detail::kMaxCheckpointArray);
      if (tables.size() != f.tables().size() || mlp.size() != f.mlp_params().size())
        throw DataError(path + ": field parameter counts do not match the embedded config");
      f.tables() = std::move(tables);
      f.mlp_params() = std::move(mlp);
      ck.scale_clamp_count = r.u64();
      f.set_scale_clamp_count(ck.scale_clamp_count);
      ck.state.field = std::move(f);
    }
  }
  {
    auto s = section("OPTM");
    bin::Reader r(s, path + " OPTM");
    for (auto& m : ck.state.moments) m = detail::get_moments(r);
    ck.state.table_moments = detail::get_moments(r);
    ck.state.mlp_moments = detail::get_moments(r);
  }
  {
    auto s = section("GACC");
    bin::Reader r(s, path + " GACC");
    ck.state.grad_accum = r.f32_array(detail::kMaxCheckpointArray);
    ck.state.grad_count = r.f32_array(detail::kMaxCheckpointArray);
  }
  return ck;
}

/// Query-side view of a checkpoint.
inline SnapshotPtr snapshot_from_checkpoint(const Checkpoint& ck) {
  auto s = std::make_shared<SceneSnapshot>();
  s->gaussians = ck.state.gaussians;
  if (ck.state.field) {
    s->field = *ck.state.field;
    s->has_field = true;
  }
  s->prune_opacity = ck.config.train.prune_opacity;
  const auto& bg = ck.config.train.background;
  s->background = {float(bg[0]), float(bg[1]), float(bg[2])};
  s->iteration = ck.state.iteration;
  return s;
}

}  // namespace legs
