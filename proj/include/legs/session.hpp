#pragma once

// Training loop over a keyframe stream, in batch mode (every record ingested
// up front) or follow mode (a producer thread feeds a bounded queue and one
// keyframe is ingested per iterations_per_keyframe steps).
//
// The metrics log is a pure function of (config, stream, seed): it carries no
// wall-clock data, so identical runs give byte-identical logs. Wall time goes
// to the optional timing log.

#include <atomic>
#include <chrono>
#include <memory>
#include <mutex>
#include <ostream>
#include <thread>

#include "legs/bounded_queue.hpp"
#include "legs/checkpoint.hpp"
#include "legs/config.hpp"
#include "legs/stream.hpp"
#include "legs/trainer.hpp"

namespace legs {

/// Latest published snapshot; readers never block the trainer for long.
class SnapshotSlot {
 public:
  void publish(SnapshotPtr s) {
    std::lock_guard lock(mu_);
    current_ = std::move(s);
  }
  SnapshotPtr load() const {
    std::lock_guard lock(mu_);
    return current_;
  }

 private:
  mutable std::mutex mu_;
  SnapshotPtr current_;
};

struct SessionOptions {
  bool follow = false;
  std::optional<std::uint64_t> stop_at;  // stop (resumably) at this iteration
  std::ostream* metrics = nullptr;       // JSON lines
  std::ostream* timing = nullptr;        // JSON lines with wall time
  SnapshotSlot* snapshots = nullptr;
  bool log_steps = true;                 // one metrics line per iteration
};

struct SessionSummary {
  std::uint64_t iterations = 0;
  std::size_t keyframes = 0;
  std::size_t pose_updates = 0;
  std::size_t gaussians = 0;
  double train_psnr = 0;
  std::optional<double> heldout_psnr;
  std::optional<double> seconds_to_20db;
  double wall_seconds = 0;
};

class TrainingSession {
 public:
  using Warn = Trainer::Warn;

  TrainingSession(RunConfig rc, fs::path stream_dir, Warn warn = {})
      : rc_(std::move(rc)), dir_(std::move(stream_dir)), warn_(std::move(warn)), trainer_(rc_.train, rc_.field, warn_) {
    if (fs::exists(dir_ / kHeldoutName)) {
      for (auto& r : read_stream(dir_, kHeldoutName))
        if (auto* kf = std::get_if<Keyframe>(&r)) heldout_.push_back(std::move(*kf));
    }
  }

  /// Restores optimizer state from a checkpoint and replays the consumed
  /// stream prefix for keyframe poses and targets.
  void resume(const Checkpoint& ck) {
    StreamReader reader(dir_);
    if (ck.cursor > reader.size())
      throw DataError("checkpoint cursor " + std::to_string(ck.cursor) + " is past the end of the stream");
    for (std::uint64_t i = 0; i < ck.cursor; ++i) {
      const auto r = reader.next();
      if (const auto* kf = std::get_if<Keyframe>(&*r)) trainer_.ingest_keyframe(*kf, dir_, false);
      else trainer_.apply_pose_update(std::get<PoseUpdateEvent>(*r), false);  // Gaussians were saved already moved
    }
    TrainerState& st = trainer_.state();
    st.gaussians = ck.state.gaussians;
    if (st.field.has_value() != ck.state.field.has_value())
      throw DataError("checkpoint and config disagree about the language field");
    st.field = ck.state.field;
    st.moments = ck.state.moments;
    st.table_moments = ck.state.table_moments;
    st.mlp_moments = ck.state.mlp_moments;
    st.grad_accum = ck.state.grad_accum;
    st.grad_count = ck.state.grad_count;
    st.iteration = ck.state.iteration;
    st.scene_extent = ck.state.scene_extent;
    st.rng = ck.state.rng;
    st.lang_rng = ck.state.lang_rng;
    cursor_ = ck.cursor;
  }

  SessionSummary run(const SessionOptions& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    SessionSummary sum;
    StreamReader reader(dir_);
    reader.seek(cursor_);
    BoundedQueue<StreamRecord> queue(64);
    std::exception_ptr producer_error;
    std::thread producer([&] { produce_stream(reader, queue, producer_error); });
    struct Joiner {
      BoundedQueue<StreamRecord>& q;
      std::thread& t;
      ~Joiner() {
        q.close();
        if (t.joinable()) t.join();
      }
    } joiner{queue, producer};

    bool exhausted = false;
    // Pops records up to and including the next keyframe. Returns false once
    // the stream is exhausted.
    auto ingest_next = [&]() -> bool {
      while (auto r = queue.pop()) {
        ++cursor_;
        if (auto* kf = std::get_if<Keyframe>(&*r)) {
          trainer_.ingest_keyframe(*kf, dir_);
          log({{"event", "keyframe"}, {"iter", trainer_.iteration()}, {"seq", kf->seq},
               {"gaussians", trainer_.gaussian_count()}}, opt);
          ++sum.keyframes;
          return true;
        }
        const auto& ev = std::get<PoseUpdateEvent>(*r);
        trainer_.apply_pose_update(ev);
        log({{"event", "pose_update"}, {"iter", trainer_.iteration()}, {"trigger_seq", ev.trigger_seq},
             {"corrections", ev.corrections.size()}}, opt);
        ++sum.pose_updates;
      }
      if (producer_error) std::rethrow_exception(producer_error);
      exhausted = true;
      return false;
    };

    const std::uint64_t ipk = static_cast<std::uint64_t>(rc_.train.iterations_per_keyframe);
    const std::uint64_t budget = static_cast<std::uint64_t>(rc_.train.iterations);
    const std::uint64_t stop = std::min(budget, opt.stop_at.value_or(budget));
    if (!opt.follow)
      while (!exhausted) ingest_next();

    while (trainer_.iteration() < stop) {
      if (opt.follow)
        while (!exhausted && trainer_.iteration() >= trainer_.state().views.size() * ipk) ingest_next();
      if (trainer_.state().views.empty()) throw DataError("stream contains no keyframes");
      const StepLosses l = trainer_.train_step();
      const std::uint64_t it = l.iteration;
      if (opt.log_steps) {
        Json j{{"iter", it},     {"keyframe", l.keyframe}, {"l1", l.l1},   {"ssim", l.ssim},
               {"rgb", l.rgb},   {"total", l.total},       {"psnr", l.psnr}, {"gaussians", l.gaussians}};
        if (l.lang) {
          j["lang"] = *l.lang;
          j["scale"] = l.scale;
        }
        log(j, opt);
      }
      const auto& c = rc_.train;
      if (it % c.nan_check_interval == 0) trainer_.check_finite();
      if (it % c.densify_interval == 0 && it >= static_cast<std::uint64_t>(c.densify_from) &&
          it <= static_cast<std::uint64_t>(c.densify_until)) {
        const DensifyStats d = trainer_.densify_and_prune();
        log({{"event", "densify"}, {"iter", it}, {"cloned", d.cloned}, {"split", d.split}, {"pruned", d.pruned},
             {"capped", d.capped}, {"gaussians", trainer_.gaussian_count()}}, opt);
      }
      if (it % c.eval_interval == 0 || it == budget) {
        const double train = trainer_.train_psnr();
        Json j{{"event", "eval"}, {"iter", it}, {"train_psnr", train}};
        if (!heldout_.empty()) j["heldout_psnr"] = trainer_.mean_psnr(heldout_);
        log(j, opt);
        if (train >= 20.0 && !sum.seconds_to_20db) sum.seconds_to_20db = elapsed();
        if (opt.timing) *opt.timing << Json{{"iter", it}, {"wall_s", elapsed()}, {"train_psnr", train}}.dump() << '\n';
      }
      if (opt.snapshots && it % c.snapshot_interval == 0) opt.snapshots->publish(trainer_.snapshot());
    }
    // Budget spent: remaining records still update poses and the view set.
    if (opt.follow && trainer_.iteration() >= budget) {
      std::size_t late = 0;
      while (!exhausted)
        if (ingest_next()) ++late;
      if (late) warn(std::to_string(late) + " keyframes arrived after the iteration budget was spent");
    }
    if (opt.snapshots) opt.snapshots->publish(trainer_.snapshot());

    sum.iterations = trainer_.iteration();
    sum.gaussians = trainer_.gaussian_count();
    sum.train_psnr = trainer_.train_psnr();
    if (!heldout_.empty()) sum.heldout_psnr = trainer_.mean_psnr(heldout_);
    sum.wall_seconds = elapsed();
    if (opt.timing)
      *opt.timing << Json{{"event", "done"}, {"wall_s", sum.wall_seconds},
                          {"seconds_to_20db", sum.seconds_to_20db ? Json(*sum.seconds_to_20db) : Json()}}
                         .dump()
                  << '\n';
    return sum;
  }

  void save(const std::string& path) const { save_checkpoint(path, trainer_, rc_, cursor_); }

  const Trainer& trainer() const { return trainer_; }
  Trainer& trainer() { return trainer_; }
  const std::vector<Keyframe>& heldout() const { return heldout_; }
  std::uint64_t cursor() const { return cursor_; }

 private:
  void log(const Json& j, const SessionOptions& opt) const {
    if (opt.metrics) *opt.metrics << j.dump() << '\n';
  }
  void warn(const std::string& m) const {
    if (warn_) warn_(m);
  }

  RunConfig rc_;
  fs::path dir_;
  Warn warn_;
  Trainer trainer_;
  std::vector<Keyframe> heldout_;
  std::uint64_t cursor_ = 0;
};

}  // namespace legs
