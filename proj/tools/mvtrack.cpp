// mvtrack: simulate | train | track | eval | bench

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mvt/errors.hpp"
#include "mvt/metrics.hpp"
#include "mvt/pipeline.hpp"
#include "mvt/scene_io.hpp"
#include "mvt/scenesim.hpp"
#include "mvt/tracker.hpp"
#include "mvt/training.hpp"

namespace {

using namespace mvt;
using Clock = std::chrono::steady_clock;

constexpr const char* kVersion = "mvtrack 0.1.0";

uint64_t fnv1a(const std::string& text) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

nlohmann::json read_json(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// One manifest per run: command, config hash, seed, inputs, version, timings.
void write_manifest(const fs::path& path, const std::string& command, const nlohmann::json& config, uint64_t seed,
                    const std::vector<std::string>& inputs, const nlohmann::json& timings) {
  nlohmann::json m = {{"command", command},
                      {"config", config},
                      {"config_hash", hex(fnv1a(config.dump()))},
                      {"seed", seed},
                      {"inputs", inputs},
                      {"version", kVersion},
                      {"timings_s", timings}};
  write_file(path, m.dump(2) + "\n");
}

fs::path manifest_path(const std::string& flag, const fs::path& output) {
  if (!flag.empty()) return flag;
  fs::path p = output;
  if (p.filename().empty()) p = p.parent_path();
  return fs::path(p.string() + ".run.json");
}

std::vector<int> parse_ids(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ValidationError("invalid view id '" + item + "'");
    }
  }
  return out;
}

// ---- simulate ----
struct SimulateArgs {
  std::string out, config, manifest;
  int scenes = -1, views = -1, frames = -1, width = -1, height = -1, tracks = -1;
  long long seed = -1;
};

int cmd_simulate(const SimulateArgs& a, int threads) {
  const auto t0 = Clock::now();
  SimConfig c;
  if (!a.config.empty()) {
    const auto j = read_json(a.config);
    c.num_scenes = j.value("num_scenes", c.num_scenes);
    c.num_views = j.value("num_views", c.num_views);
    c.num_frames = j.value("num_frames", c.num_frames);
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    c.num_tracks = j.value("num_tracks", c.num_tracks);
    c.min_bodies = j.value("min_bodies", c.min_bodies);
    c.max_bodies = j.value("max_bodies", c.max_bodies);
    c.max_speed = j.value("max_speed", c.max_speed);
    c.max_yaw_rate = j.value("max_yaw_rate", c.max_yaw_rate);
    c.camera_distance = j.value("camera_distance", c.camera_distance);
    c.ground_half_extent = j.value("ground_half_extent", c.ground_half_extent);
    c.field_of_view_deg = j.value("field_of_view_deg", c.field_of_view_deg);
    c.threshold_scale = j.value("threshold_scale", c.threshold_scale);
    c.seed = j.value("seed", c.seed);
  }
  if (a.scenes >= 0) c.num_scenes = a.scenes;
  if (a.views >= 0) c.num_views = a.views;
  if (a.frames >= 0) c.num_frames = a.frames;
  if (a.width >= 0) c.width = a.width;
  if (a.height >= 0) c.height = a.height;
  if (a.tracks >= 0) c.num_tracks = a.tracks;
  if (a.seed >= 0) c.seed = static_cast<uint64_t>(a.seed);
  c.validate();
  const std::string index = generate_dataset(c, a.out, threads);
  const auto config = nlohmann::json::parse(index).at("config");
  write_manifest(manifest_path(a.manifest, a.out), "simulate", config, c.seed, {}, {{"total", seconds_since(t0)}});
  std::printf("wrote %d scenes to %s\n", c.num_scenes, a.out.c_str());
  return 0;
}

// ---- train ----
struct TrainArgs {
  std::string data, config, out, log, manifest;
  int steps = -1;
  long long stop_after = -1;
  long long seed = -1;
  bool resume = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, int threads) {
  const auto t0 = Clock::now();
  TrainingConfig c;
  if (!a.config.empty()) c = training_config_from_json(read_json(a.config));
  if (a.steps >= 0) c.steps = a.steps;
  if (a.seed >= 0) c.seed = static_cast<uint64_t>(a.seed);
  c.threads = threads;
  c.validate();
  const auto scenes = load_dataset(a.data);
  const double load_s = seconds_since(t0);
  TrainRun run;
  run.checkpoint = a.out;
  run.log_csv = a.log.empty() ? fs::path(a.out + ".log.csv") : fs::path(a.log);
  run.resume = a.resume;
  run.stop_after = a.stop_after;
  const auto t1 = Clock::now();
  train(c, scenes, run, [&](int64_t step, const StepLosses& l) {
    if (!a.quiet && (c.log_every > 0 && (step % c.log_every == 0 || step + 1 == c.steps))) {
      std::fprintf(stderr, "step %lld loss %.6f xyz %.6f vis %.6f |g| %.3f\n", static_cast<long long>(step), l.loss,
                   l.loss_xyz, l.loss_vis, l.grad_norm);
    }
  });
  write_manifest(manifest_path(a.manifest, a.out), "train", training_config_to_json(c), c.seed, {a.data},
                 {{"load", load_s}, {"train", seconds_since(t1)}, {"total", seconds_since(t0)}});
  return 0;
}

// ---- track ----
struct TrackArgs {
  std::string scene, checkpoint, queries, out, views, depth_dir = "depth", manifest;
  double noise = 0;
  long long noise_seed = 0;
  int window = 0, iterations = 0;
};

int cmd_track(const TrackArgs& a, int threads) {
  const auto t0 = Clock::now();
  LoadOptions lo;
  lo.ground_truth = false;
  lo.depth_dir = a.depth_dir;
  SceneData scene = load_scene(a.scene, lo);
  if (!a.queries.empty()) scene.queries = read_queries_csv(a.queries);
  const auto model = load_tracker(a.checkpoint);
  TrackOptions o;
  o.views = parse_ids(a.views);
  o.depth_noise = a.noise;
  o.noise_seed = static_cast<uint64_t>(a.noise_seed);
  o.window = a.window;
  o.iterations = a.iterations;
  o.threads = threads;
  const auto t1 = Clock::now();
  const TrackingResult r = track_scene(*model, scene, o);
  const double track_s = seconds_since(t1);
  write_pred_tracks_csv(a.out, r.tracks);
  nlohmann::json config = {{"views", o.views},   {"depth_dir", a.depth_dir}, {"depth_noise", a.noise},
                           {"noise_seed", a.noise_seed}, {"window", a.window},  {"iterations", a.iterations},
                           {"model", tracker_config_to_json(model->config())}};
  write_manifest(manifest_path(a.manifest, a.out), "track", config, o.noise_seed,
                 {a.scene, a.checkpoint, a.queries.empty() ? (fs::path(a.scene) / "queries.csv").string() : a.queries},
                 {{"track", track_s}, {"total", seconds_since(t0)}});
  return 0;
}

// ---- eval ----
struct EvalArgs {
  std::string pred, gt, queries, scene_name = "scene", pred_dir, data, json_out, csv_out, manifest;
  std::vector<double> thresholds;
  double threshold_scale = 1.0;
};

int cmd_eval(const EvalArgs& a) {
  const auto t0 = Clock::now();
  EvalConfig config;
  config.thresholds = a.thresholds.empty() ? reference_thresholds(a.threshold_scale) : a.thresholds;
  std::vector<SceneMetrics> scenes;
  std::vector<std::string> inputs;
  if (!a.data.empty()) {
    if (a.pred_dir.empty()) throw ValidationError("eval: --data requires --pred-dir");
    LoadOptions lo;
    lo.images = false;
    lo.depth = false;
    bool first = true;
    for (const auto& dir : dataset_scene_dirs(a.data)) {
      const SceneData s = load_scene(dir, lo);
      if (first && a.thresholds.empty()) config.thresholds = reference_thresholds(s.manifest.threshold_scale);
      first = false;
      const fs::path pred = fs::path(a.pred_dir) / (s.manifest.scene_id + ".csv");
      scenes.push_back(evaluate_scene(s.manifest.scene_id, read_tracks_csv(pred), s.ground_truth, config));
      inputs.push_back(pred.string());
    }
    inputs.push_back(a.data);
  } else {
    if (a.pred.empty() || a.gt.empty()) throw ValidationError("eval: need --pred and --gt, or --data and --pred-dir");
    auto gt = read_tracks_csv(a.gt);
    if (!a.queries.empty()) {
      const auto qs = read_queries_csv(a.queries);
      for (auto& tr : gt) {
        for (const auto& q : qs) {
          if (q.track_id == tr.track_id) tr.query_frame = q.query_frame;
        }
      }
    }
    scenes.push_back(evaluate_scene(a.scene_name, read_tracks_csv(a.pred), gt, config));
    inputs = {a.pred, a.gt};
    if (!a.queries.empty()) inputs.push_back(a.queries);
  }
  const MetricsReport report = aggregate_report(std::move(scenes), config);
  const std::string json = report_to_json(report).dump(2) + "\n";
  if (!a.json_out.empty()) write_file(a.json_out, json);
  if (!a.csv_out.empty()) write_file(a.csv_out, report_to_csv(report));
  const Aggregate& d = report.dataset;
  std::printf("MTE %.6f  OA %.4f  delta_avg %.4f  AJ %.4f  (excluded: %d spatial, %d jaccard)\n",
              d.mte.value_or(NAN), d.oa.value_or(NAN), d.delta_avg.value_or(NAN), d.aj.value_or(NAN),
              report.excluded_spatial, report.excluded_jaccard);
  const fs::path primary = !a.json_out.empty() ? fs::path(a.json_out) : fs::path(a.csv_out.empty() ? "eval" : a.csv_out);
  write_manifest(manifest_path(a.manifest, primary), "eval", {{"thresholds", config.thresholds}}, 0, inputs,
                 {{"total", seconds_since(t0)}});
  return 0;
}

// ---- bench ----
struct BenchArgs {
  std::string scene, checkpoint, out, manifest, views;
  int frames = 0, repeat = 1, window = 0, iterations = 0;
};

int cmd_bench(const BenchArgs& a, int threads) {
  const auto t0 = Clock::now();
  SceneData scene = load_scene(a.scene, LoadOptions{true, true, false, "depth"});
  const auto model = load_tracker(a.checkpoint);
  if (a.frames > 0 && a.frames < scene.manifest.num_frames) {
    // Truncate the clip; queries past the end are dropped.
    scene.manifest.num_frames = a.frames;
    for (auto& v : scene.rgb) v.resize(a.frames);
    for (auto& v : scene.depth) v.resize(a.frames);
    for (auto& c : scene.cameras) {
      if (!c.is_static()) c.E.resize(a.frames);
    }
    std::erase_if(scene.queries, [&](const Query& q) { return q.query_frame >= a.frames; });
  }
  const double load_s = seconds_since(t0);
  TrackOptions o;
  o.views = parse_ids(a.views);
  o.window = a.window;
  o.iterations = a.iterations;
  o.threads = threads;
  const int L = scene.manifest.num_frames;
  const int T = a.window > 0 ? a.window : model->config().window;
  int window_frames = 0;
  for (const auto& [s, len] : window_spans(L, T)) window_frames += len;

  double best = 0;
  for (int r = 0; r < std::max(1, a.repeat); ++r) {
    const auto t1 = Clock::now();
    (void)track_scene(*model, scene, o);
    const double s = seconds_since(t1);
    if (r == 0 || s < best) best = s;
  }
  nlohmann::json report = {{"scene", a.scene},
                           {"frames", L},
                           {"views", static_cast<int>(o.views.empty() ? scene.num_views() : o.views.size())},
                           {"queries", scene.queries.size()},
                           {"window", T},
                           {"window_frames", window_frames},
                           {"wall_time_s", best},
                           {"load_time_s", load_s},
                           {"raw_fps", window_frames / best},
                           {"effective_fps", L / best},
                           {"timed_region", "encode + fuse + windowed refinement; excludes loading and depth estimation"}};
  const std::string text = report.dump(2) + "\n";
  if (!a.out.empty()) write_file(a.out, text);
  std::fputs(text.c_str(), stdout);
  write_manifest(manifest_path(a.manifest, a.out.empty() ? fs::path("bench") : fs::path(a.out)), "bench",
                 {{"frames", a.frames}, {"repeat", a.repeat}, {"window", T}, {"views", o.views}}, 0,
                 {a.scene, a.checkpoint}, {{"load", load_s}, {"track", best}, {"total", seconds_since(t0)}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view 3D point tracking"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads (1 = bit-deterministic)")->check(CLI::PositiveNumber);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "generate a synthetic dataset");
  s->add_option("--out", sim.out, "output directory")->required();
  s->add_option("--config", sim.config, "simulator config JSON");
  s->add_option("--scenes", sim.scenes);
  s->add_option("--views", sim.views);
  s->add_option("--frames", sim.frames);
  s->add_option("--width", sim.width);
  s->add_option("--height", sim.height);
  s->add_option("--tracks", sim.tracks);
  s->add_option("--seed", sim.seed);
  s->add_option("--manifest", sim.manifest, "run manifest path (default <out>.run.json)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a tracker");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--config", tr.config, "training config JSON");
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--log", tr.log, "loss log CSV (default <out>.log.csv)");
  t->add_option("--steps", tr.steps);
  t->add_option("--stop-after", tr.stop_after, "end this session after N total steps (schedule unchanged)");
  t->add_option("--seed", tr.seed);
  t->add_flag("--resume", tr.resume, "continue from --out if it exists");
  t->add_flag("--quiet", tr.quiet);
  t->add_option("--manifest", tr.manifest);

  TrackArgs tk;
  auto* k = app.add_subcommand("track", "track query points through a scene");
  k->add_option("--scene", tk.scene, "scene directory")->required();
  k->add_option("--checkpoint", tk.checkpoint)->required();
  k->add_option("--queries", tk.queries, "queries CSV (default <scene>/queries.csv)");
  k->add_option("--out", tk.out, "predicted tracks CSV")->required();
  k->add_option("--views", tk.views, "comma-separated view ids (default all)");
  k->add_option("--depth-dir", tk.depth_dir, "depth directory inside the scene (e.g. estimated depth)");
  k->add_option("--depth-noise", tk.noise, "Gaussian depth noise sigma")->check(CLI::NonNegativeNumber);
  k->add_option("--noise-seed", tk.noise_seed);
  k->add_option("--window", tk.window);
  k->add_option("--iterations", tk.iterations);
  k->add_option("--manifest", tk.manifest);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score predicted tracks");
  e->add_option("--pred", ev.pred, "predicted tracks CSV");
  e->add_option("--gt", ev.gt, "ground-truth tracks CSV");
  e->add_option("--queries", ev.queries, "queries CSV giving query frames");
  e->add_option("--scene-name", ev.scene_name);
  e->add_option("--data", ev.data, "dataset directory (with --pred-dir)");
  e->add_option("--pred-dir", ev.pred_dir, "directory of <scene_id>.csv predictions");
  e->add_option("--thresholds", ev.thresholds, "distance thresholds")->delimiter(',');
  e->add_option("--threshold-scale", ev.threshold_scale, "scale of the reference thresholds");
  e->add_option("--json", ev.json_out);
  e->add_option("--csv", ev.csv_out);
  e->add_option("--manifest", ev.manifest);

  BenchArgs bn;
  auto* b = app.add_subcommand("bench", "measure tracking throughput");
  b->add_option("--scene", bn.scene)->required();
  b->add_option("--checkpoint", bn.checkpoint)->required();
  b->add_option("--frames", bn.frames, "use only the first N frames");
  b->add_option("--repeat", bn.repeat, "timed repetitions (best is reported)");
  b->add_option("--views", bn.views);
  b->add_option("--window", bn.window);
  b->add_option("--iterations", bn.iterations);
  b->add_option("--out", bn.out, "report JSON");
  b->add_option("--manifest", bn.manifest);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 1;
  }
  try {
    if (*s) return cmd_simulate(sim, threads);
    if (*t) return cmd_train(tr, threads);
    if (*k) return cmd_track(tk, threads);
    if (*e) return cmd_eval(ev);
    if (*b) return cmd_bench(bn, threads);
  } catch (const NumericDivergence& err) {
    std::fprintf(stderr, "numeric divergence: %s\n", err.what());
    return 3;
  } catch (const IoError& err) {
    std::fprintf(stderr, "io error: %s\n", err.what());
    return 2;
  } catch (const ValidationError& err) {
    std::fprintf(stderr, "validation error: %s\n", err.what());
    return 1;
  } catch (const std::invalid_argument& err) {
    std::fprintf(stderr, "validation error: %s\n", err.what());
    return 1;
  }
  return 0;
}
