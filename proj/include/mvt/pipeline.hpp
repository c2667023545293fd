#pragma once

// End-to-end helpers shared by the command line and tests: track a loaded
// scene and score predictions against its ground truth.

#include <vector>

#include "mvt/metrics.hpp"
#include "mvt/tracker.hpp"

namespace mvt {

struct TrackOptions {
  std::vector<int> views;    // empty = all
  double depth_noise = 0;    // sigma added to valid depths
  uint64_t noise_seed = 0;   // noise for (view, frame) is drawn from derive_seed(noise_seed, view_id, frame)
  int window = 0;            // 0 = model default
  int iterations = 0;        // 0 = model default
  int threads = 1;
};

// Runs encoding, fusion and windowed refinement without recording
// gradients.
TrackingResult track_scene(const TrackerModel& model, const SceneData& scene, const TrackOptions& options);

// Thresholds from the scene manifest's threshold scale.
EvalConfig scene_eval_config(const SceneData& scene);

// Tracks every scene (in parallel over scenes when threads > 1) and
// aggregates metrics per scene then over the dataset. Thresholds come from
// the first scene's manifest.
MetricsReport evaluate_model(const TrackerModel& model, const std::vector<SceneData>& scenes,
                             const TrackOptions& options);

}  // namespace mvt
