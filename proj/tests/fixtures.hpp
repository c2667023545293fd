#pragma once

// Small simulated scenes and toy tracker configs shared by the tests.

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "mvt/scene_io.hpp"
#include "mvt/scenesim.hpp"
#include "mvt/tracker.hpp"

namespace mvt::testing {

// Fresh directory under the system temp dir, unique per process and call.
inline fs::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const fs::path dir = fs::temp_directory_path() /
                       ("mvt_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

inline SimConfig tiny_sim(uint64_t seed, int frames = 6, int views = 2, int tracks = 6) {
  SimConfig c;
  c.num_scenes = 1;
  c.num_views = views;
  c.num_frames = frames;
  c.width = 32;
  c.height = 32;
  c.num_tracks = tracks;
  c.min_bodies = 2;
  c.max_bodies = 3;
  c.seed = seed;
  return c;
}

// Generates `config.num_scenes` scenes on disk and loads them.
inline std::vector<SceneData> simulate(const SimConfig& config, const std::string& tag) {
  const fs::path dir = temp_dir(tag);
  generate_dataset(config, dir);
  auto scenes = load_dataset(dir);
  fs::remove_all(dir);
  return scenes;
}

inline TrackerConfig tiny_tracker(int window = 4, int iterations = 2) {
  TrackerConfig c;
  c.encoder.feature_dim = 8;
  c.encoder.stem_width = 8;
  c.encoder.stage_width = 8;
  c.encoder.residual_blocks = 1;
  c.encoder.levels = 2;
  c.correlation.neighbors = 4;
  c.correlation.offset_scale = 4;
  c.width = 24;
  c.heads = 2;
  c.blocks = 1;
  c.virtual_tracks = 4;
  c.mlp_hidden = 32;
  c.num_freqs = 4;
  c.window = window;
  c.iterations = iterations;
  c.delta_scale = 0.1;
  return c;
}

// Replaces the zero-initialized output heads with small random weights so
// that refinement actually moves the tracks.
inline void randomize_heads(TrackerModel& model, uint64_t seed, double amplitude = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  for (auto& p : model.params().items()) {
    if (p.name.rfind("refiner.delta_", 0) != 0) continue;
    for (Real& v : p.tensor.data()) v = static_cast<Real>(u(rng));
  }
}

// First-window state exactly as run_windowed builds it.
inline WindowState first_window(const EncodedClip& clip, const std::vector<Query>& queries, int length) {
  WindowState s;
  s.start = 0;
  s.length = length;
  std::vector<int64_t> rows;
  for (int i = 0; i < static_cast<int>(queries.size()); ++i) {
    if (queries[i].query_frame >= length) continue;
    s.tracks.push_back(i);
    s.query_frame.push_back(queries[i].query_frame);
    s.query_xyz.push_back(queries[i].xyz);
    const int64_t row = init_track_feature(*clip.clouds[queries[i].query_frame][0], queries[i].xyz).feature_row;
    for (int t = 0; t < length; ++t) {
      s.active.push_back(t >= queries[i].query_frame);
      rows.push_back(row);
    }
  }
  const int64_t Q = static_cast<int64_t>(rows.size());
  s.disp = Tensor::zeros({Q, 3});
  s.feat = gather_rows(clip.bank.levels[0], rows);
  s.vis = Tensor::zeros({Q});
  return s;
}

}  // namespace mvt::testing
