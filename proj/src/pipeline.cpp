#include "mvt/pipeline.hpp"

#include <random>

#include "mvt/errors.hpp"
#include "mvt/parallel.hpp"
#include "mvt/scenesim.hpp"
#include "mvt/training.hpp"

namespace mvt {

TrackingResult track_scene(const TrackerModel& model, const SceneData& scene, const TrackOptions& options) {
  NoGradGuard no_grad;
  Clip clip = make_clip(scene, options.views);
  std::vector<std::vector<DepthMap>> noisy;
  if (options.depth_noise > 0) {
    for (auto& view : clip.views) {
      std::vector<DepthMap> frames;
      for (int t = 0; t < clip.num_frames; ++t) frames.push_back(*view.depth[t]);
      noisy.push_back(std::move(frames));
    }
    for (size_t v = 0; v < clip.views.size(); ++v) {
      const int view_id = clip.views[v].cameras[0].view_id;
      for (int t = 0; t < clip.num_frames; ++t) {
        std::mt19937_64 rng(derive_seed(options.noise_seed, static_cast<uint64_t>(view_id), static_cast<uint64_t>(t)));
        add_depth_noise(noisy[v][t], options.depth_noise, rng);
        clip.views[v].depth[t] = &noisy[v][t];
      }
    }
  }
  const EncodedClip encoded = encode_clip(model, clip, options.threads);
  const int T = options.window > 0 ? options.window : model.config().window;
  const int M = options.iterations > 0 ? options.iterations : model.config().iterations;
  return run_windowed(model, encoded, scene.queries, T, M);
}

EvalConfig scene_eval_config(const SceneData& scene) {
  EvalConfig c;
  c.thresholds = reference_thresholds(scene.manifest.threshold_scale);
  return c;
}

MetricsReport evaluate_model(const TrackerModel& model, const std::vector<SceneData>& scenes,
                             const TrackOptions& options) {
  if (scenes.empty()) throw ValidationError("evaluate_model: no scenes");
  const EvalConfig config = scene_eval_config(scenes[0]);
  std::vector<SceneMetrics> results(scenes.size());
  TrackOptions inner = options;
  inner.threads = 1;
  parallel_for(static_cast<int>(scenes.size()), options.threads, [&](int i) {
    const TrackingResult r = track_scene(model, scenes[i], inner);
    results[i] = evaluate_scene(scenes[i].manifest.scene_id, r.tracks, scenes[i].ground_truth, config);
  });
  return aggregate_report(std::move(results), config);
}

}  // namespace mvt
