// legs: simulate, train, render, query and evaluate.
//
// Every failure ends with one JSON line on stderr,
//   {"error": "config"|"data"|"numerical"|"internal", "message": ...}
// and exit code 2, 3, 4 (1 for internal errors).

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "legs/checkpoint.hpp"
#include "legs/config.hpp"
#include "legs/evaluate.hpp"
#include "legs/png_io.hpp"
#include "legs/query.hpp"
#include "legs/session.hpp"
#include "legs/simworld.hpp"

namespace {

using namespace legs;

void warn(const std::string& msg) { std::cerr << Json{{"warning", msg}}.dump() << '\n'; }

PinholeCamera read_camera(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open camera file " + path);
  Json j;
  try {
    j = Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
  return camera_from_json(j, path);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path);
  return os;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string scene, traj, rig, out;
};

int run_simulate(const SimulateArgs& a) {
  const auto scene = load_scene(a.scene);
  const auto traj = load_trajectory(a.traj);
  const auto rig = load_rig(a.rig);
  const auto stats = sim::generate_stream(scene, traj, rig, a.out);
  for (const auto& [src, name] : {std::pair{a.scene, "scene.toml"}, {a.traj, "trajectory.toml"}, {a.rig, "rig.toml"}})
    fs::copy_file(src, fs::path(a.out) / name, fs::copy_options::overwrite_existing);
  std::cout << Json{{"stream", a.out},
                    {"keyframes", stats.keyframes},
                    {"pose_updates", stats.events},
                    {"heldout", stats.heldout}}
                   .dump()
            << '\n';
  return 0;
}

struct TrainArgs {
  std::string stream, config, out, metrics, timing, resume;
  bool follow = false;
  std::optional<std::uint64_t> stop_at, seed;
  std::optional<int> iterations;
};

int run_train(const TrainArgs& a) {
  RunConfig rc;
  std::optional<Checkpoint> ck;
  if (!a.resume.empty()) {
    ck = load_checkpoint(a.resume);
    rc = ck->config;
  } else {
    rc = load_run_config(a.config);
  }
  if (a.seed) rc.train.seed = *a.seed;
  if (a.iterations) rc.train.iterations = *a.iterations;
  rc.validate();

  TrainingSession session(rc, a.stream, warn);
  if (ck) session.resume(*ck);
  std::ofstream metrics, timing;
  SessionOptions opt;
  opt.follow = a.follow;
  opt.stop_at = a.stop_at;
  if (!a.metrics.empty()) {
    metrics = open_out(a.metrics);
    metrics << Json{{"event", "config"}, {"mode", a.follow ? "follow" : "batch"}, {"toml", run_config_to_toml(rc)}}.dump()
            << '\n';
    opt.metrics = &metrics;
  }
  if (!a.timing.empty()) {
    timing = open_out(a.timing);
    opt.timing = &timing;
  }
  const SessionSummary s = session.run(opt);
  session.save(a.out);
  open_out(a.out + ".toml") << run_config_to_toml(rc);
  Json j{{"checkpoint", a.out},   {"iterations", s.iterations},     {"keyframes", s.keyframes},
         {"pose_updates", s.pose_updates}, {"gaussians", s.gaussians}, {"train_psnr", s.train_psnr},
         {"wall_s", s.wall_seconds}};
  j["heldout_psnr"] = s.heldout_psnr ? Json(*s.heldout_psnr) : Json();
  j["seconds_to_20db"] = s.seconds_to_20db ? Json(*s.seconds_to_20db) : Json();
  std::cout << j.dump() << '\n';
  return 0;
}

struct QueryInputs {
  std::string query, negatives;
  std::size_t index = 0;
  std::vector<double> scales;
};

QuerySpec load_query(const SceneSnapshot& snap, const QueryInputs& a) {
  const int dim = snap.field.dim();
  const auto qf = read_embeddings(a.query, dim, warn);
  if (qf.records.empty()) throw DataError(a.query + ": no records");
  const auto rows = embedding_rows(qf.records[0], dim);
  if (a.index >= rows.size())
    throw DataError("query index " + std::to_string(a.index) + " out of range (" + std::to_string(rows.size()) + ")");
  std::vector<Embedding> negs;
  if (!a.negatives.empty()) {
    for (const auto& r : read_embeddings(a.negatives, dim, warn).records)
      for (auto& e : embedding_rows(r, dim)) negs.push_back(std::move(e));
  } else if (qf.records.size() > 1) {
    negs = embedding_rows(qf.records[1], dim);
  } else {
    throw ConfigError("no negatives: pass --negatives or add a second record to the query file");
  }
  QuerySpec q;
  q.name = fs::path(a.query).stem().string() + "[" + std::to_string(a.index) + "]";
  q.embedding = rows[a.index];
  q.negatives = std::move(negs);
  q.scales = a.scales.empty()
                 ? log_scale_grid(snap.field.config().scale_min, snap.field.config().scale_max, kDefaultScaleCount)
                 : a.scales;
  return q;
}

SnapshotPtr load_snapshot(const std::string& ckpt) { return snapshot_from_checkpoint(load_checkpoint(ckpt)); }

struct RenderArgs {
  std::string ckpt, camera, out, mode = "color";
  QueryInputs query;
};

int run_render(const RenderArgs& a) {
  const auto snap = load_snapshot(a.ckpt);
  const PinholeCamera cam = read_camera(a.camera);
  if (a.mode == "color") {
    write_png(a.out, render<float>(snap->gaussians, cam, RenderMode::color, snap->background).image);
  } else if (a.mode == "depth") {
    const auto fwd = render<float>(snap->gaussians, cam, RenderMode::depth);
    Image d = fwd.image;
    // Expected depth over covered pixels; uncovered stays invalid (0).
    for (std::size_t p = 0; p < d.data.size(); ++p) {
      const double cov = 1.0 - fwd.final_transmittance[p];
      d.data[p] = cov > 0.5 ? static_cast<float>(d.data[p] / cov) : 0.0f;
    }
    write_depth_png(a.out, d);
  } else if (a.mode == "relevancy") {
    if (a.query.query.empty()) throw ConfigError("--mode relevancy needs --query");
    const auto r = localize(*snap, load_query(*snap, a.query));
    write_png(a.out, stretch_for_export(render_relevancy_map(*snap, cam, r)));
  } else {
    throw ConfigError("unknown render mode '" + a.mode + "'");
  }
  std::cout << Json{{"image", a.out}, {"mode", a.mode}}.dump() << '\n';
  return 0;
}

struct QueryArgs {
  std::string ckpt, heatmap, camera;
  QueryInputs query;
};

int run_query(const QueryArgs& a) {
  const auto snap = load_snapshot(a.ckpt);
  const QuerySpec q = load_query(*snap, a.query);
  const RelevancyResult r = localize(*snap, q);
  Json j{{"query", q.name},
         {"point", {r.point.x(), r.point.y(), r.point.z()}},
         {"relevancy", r.max_relevancy()},
         {"scale", r.argmax_scale()},
         {"gaussian", r.argmax}};
  if (!a.heatmap.empty()) {
    if (a.camera.empty()) throw ConfigError("--heatmap needs --camera");
    write_png(a.heatmap, stretch_for_export(render_relevancy_map(*snap, read_camera(a.camera), r)));
    j["heatmap"] = a.heatmap;
  }
  std::cout << j.dump() << '\n';
  return 0;
}

struct EvalArgs {
  std::string ckpt, annotations, queries, negatives, stream, out, heatmaps;
  std::vector<double> scales;
};

int run_eval(const EvalArgs& a) {
  const auto snap = load_snapshot(a.ckpt);
  const int dim = snap->field.dim();
  EvalInputs in;
  if (!a.stream.empty()) {
    if (fs::exists(fs::path(a.stream) / kHeldoutName))
      for (auto& r : read_stream(a.stream, kHeldoutName))
        if (auto* kf = std::get_if<Keyframe>(&r)) in.heldout.push_back(std::move(*kf));
    if (fs::exists(fs::path(a.stream) / "gt.json")) in.truth = read_ground_truth(fs::path(a.stream) / "gt.json");
  }
  in.annotations = read_annotations(a.annotations);
  const auto qf = read_embeddings(a.queries, dim, warn);
  if (qf.records.empty()) throw DataError(a.queries + ": no records");
  in.query_rows = embedding_rows(qf.records[0], dim);
  if (!a.negatives.empty()) {
    for (const auto& r : read_embeddings(a.negatives, dim, warn).records)
      for (auto& e : embedding_rows(r, dim)) in.negatives.push_back(std::move(e));
  } else if (qf.records.size() > 1) {
    in.negatives = embedding_rows(qf.records[1], dim);
  } else {
    throw ConfigError("no negatives: pass --negatives or add a second record to the query file");
  }
  if (!snap->has_field) throw DataError("checkpoint has no language field");
  const auto scales = a.scales.empty() ? log_scale_grid(snap->field.config().scale_min,
                                                        snap->field.config().scale_max, kDefaultScaleCount)
                                       : a.scales;
  const RunReport rep = evaluate_run(*snap, in, scales);
  if (!a.heatmaps.empty()) {
    fs::create_directories(a.heatmaps);
    const auto qs = queries_for(in.annotations, in.query_rows, in.negatives, scales);
    for (std::size_t i = 0; i < qs.size(); ++i) {
      const auto r = localize(*snap, qs[i]);
      write_png((fs::path(a.heatmaps) / (std::to_string(i) + "_" + qs[i].name + ".png")).string(),
                stretch_for_export(render_relevancy_map(*snap, in.annotations[i].camera, r)));
    }
  }
  Json j = report_to_json(rep);
  j["checkpoint"] = a.ckpt;
  if (!a.out.empty()) open_out(a.out) << j.dump(1) << '\n';
  std::cout << j.dump() << '\n';
  std::cerr << "recall " << rep.recall.successes() << "/" << rep.recall.total() << '\n';
  return 0;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << Json{{"error", kind}, {"message", message}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-embedded Gaussian splatting: simulate, train, render, query, evaluate"};
  app.require_subcommand(1);

  SimulateArgs sim_a;
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic keyframe stream");
  sim->add_option("--scene", sim_a.scene, "Scene TOML")->required()->check(CLI::ExistingFile);
  sim->add_option("--traj", sim_a.traj, "Trajectory TOML")->required()->check(CLI::ExistingFile);
  sim->add_option("--rig", sim_a.rig, "Rig TOML")->required()->check(CLI::ExistingFile);
  sim->add_option("--out", sim_a.out, "Output stream directory")->required();

  TrainArgs tr_a;
  auto* tr = app.add_subcommand("train", "Train on a stream and write a checkpoint");
  tr->add_option("--stream", tr_a.stream, "Stream directory")->required()->check(CLI::ExistingDirectory);
  auto* cfg_opt = tr->add_option("--config", tr_a.config, "Run config TOML")->check(CLI::ExistingFile);
  auto* resume_opt = tr->add_option("--resume", tr_a.resume, "Resume from checkpoint")->check(CLI::ExistingFile);
  cfg_opt->excludes(resume_opt);
  tr->add_option("--out", tr_a.out, "Checkpoint path")->required();
  tr->add_flag("--follow", tr_a.follow, "Consume the stream incrementally (online mode)");
  tr->add_option("--metrics", tr_a.metrics, "Metrics JSONL path");
  tr->add_option("--timing", tr_a.timing, "Wall-time JSONL path");
  tr->add_option("--stop-at", tr_a.stop_at, "Stop at this iteration (resumable)");
  tr->add_option("--seed", tr_a.seed, "Override the config seed");
  tr->add_option("--iterations", tr_a.iterations, "Override the iteration budget");

  RenderArgs rd_a;
  auto* rd = app.add_subcommand("render", "Render a checkpoint from a camera");
  rd->add_option("--ckpt", rd_a.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  rd->add_option("--camera", rd_a.camera, "Camera JSON")->required()->check(CLI::ExistingFile);
  rd->add_option("--out", rd_a.out, "Output PNG")->required();
  rd->add_option("--mode", rd_a.mode, "color | depth | relevancy");
  rd->add_option("--query", rd_a.query.query, "Query LEGSEMB1 file")->check(CLI::ExistingFile);
  rd->add_option("--negatives", rd_a.query.negatives, "Negatives LEGSEMB1 file")->check(CLI::ExistingFile);
  rd->add_option("--index", rd_a.query.index, "Row of the query record");
  rd->add_option("--scales", rd_a.query.scales, "Scale grid (metres)");

  QueryArgs q_a;
  auto* qc = app.add_subcommand("query", "Localize a query embedding");
  qc->add_option("--ckpt", q_a.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  qc->add_option("--query", q_a.query.query, "Query LEGSEMB1 file")->required()->check(CLI::ExistingFile);
  qc->add_option("--negatives", q_a.query.negatives, "Negatives LEGSEMB1 file")->check(CLI::ExistingFile);
  qc->add_option("--index", q_a.query.index, "Row of the query record");
  qc->add_option("--scales", q_a.query.scales, "Scale grid (metres)");
  qc->add_option("--heatmap", q_a.heatmap, "Write a relevancy heatmap PNG");
  qc->add_option("--camera", q_a.camera, "Camera JSON for the heatmap")->check(CLI::ExistingFile);

  EvalArgs ev_a;
  auto* ev = app.add_subcommand("eval", "Recall and PSNR report");
  ev->add_option("--ckpt", ev_a.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--annotations", ev_a.annotations, "Annotation JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--queries", ev_a.queries, "Query LEGSEMB1 file")->required()->check(CLI::ExistingFile);
  ev->add_option("--negatives", ev_a.negatives, "Negatives LEGSEMB1 file")->check(CLI::ExistingFile);
  ev->add_option("--stream", ev_a.stream, "Stream directory with held-out views and gt.json")
      ->check(CLI::ExistingDirectory);
  ev->add_option("--scales", ev_a.scales, "Scale grid (metres)");
  ev->add_option("--out", ev_a.out, "Report JSON path");
  ev->add_option("--heatmaps", ev_a.heatmaps, "Directory for per-query heatmaps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("config", e.what(), 2);
  }

  try {
    if (*sim) return run_simulate(sim_a);
    if (*tr) {
      if (tr_a.config.empty() && tr_a.resume.empty()) throw ConfigError("train needs --config or --resume");
      return run_train(tr_a);
    }
    if (*rd) return run_render(rd_a);
    if (*qc) return run_query(q_a);
    if (*ev) return run_eval(ev_a);
  } catch (const legs::Error& e) {
    return fail(e.kind_name(), e.what(), e.exit_code());
  } catch (const toml::parse_error& e) {
    return fail("config", e.what(), 2);
  } catch (const fs::filesystem_error& e) {
    return fail("data", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
