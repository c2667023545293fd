#pragma once

// Losses, augmentation and the unrolled multi-window training loop.

#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "json.hpp"
#include "mvt/optim.hpp"
#include "mvt/scene_io.hpp"
#include "mvt/tracker.hpp"

namespace mvt {

struct LossConfig {
  double lambda_vis = 1.0;
  double gamma = 0.8;

  void validate() const;
};

// One (window, iteration) block of position predictions. pred is [Q, 3];
// target holds Q * 3 values; mask[q] = 0 drops row q. iteration is 1-based.
struct XyzTerm {
  Tensor pred;
  std::vector<Real> target;
  std::vector<uint8_t> mask;
  int iteration = 1;
};

// sum gamma^(M - m) * |pred - target|_1 over unmasked rows, divided by the
// number of unmasked rows across all terms. Zero when nothing is unmasked.
Tensor loss_xyz(const std::vector<XyzTerm>& terms, int iterations, double gamma);

// Visibility logits of one window. logits is [Q]; labels are 0/1.
struct VisTerm {
  Tensor logits;
  std::vector<Real> labels;
  std::vector<uint8_t> mask;
};

// Class-balanced BCE over all unmasked entries: w1 = N / (2 N1),
// w0 = N / (2 N0), averaged over N. A missing class leaves the present one
// with weight 1.
Tensor loss_vis(const std::vector<VisTerm>& terms);

struct AugmentConfig {
  bool view_drop = true;  // keep a uniform count in [min_views, available]
  int min_views = 1;
  double depth_noise = 0.0;         // Gaussian sigma on valid depths
  bool similarity_jitter = false;   // random world similarity
  double jitter_translation = 0.2;  // per-axis uniform half-range
  double jitter_scale = 0.1;        // scale in [1 - s, 1 + s]
  int max_tracks = 64;
};

// A training view of one scene: selected views, possibly noisy depth, and
// queries and labels in a possibly transformed world. Owns its buffers.
struct Sample {
  std::vector<std::vector<DepthMap>> depth;  // [selected view][frame]
  Clip clip;
  std::vector<Query> queries;
  std::vector<TrackRecord> ground_truth;  // aligned with queries
  std::vector<int> view_ids;
  Similarity world;

  Sample() = default;
  Sample(const Sample&) = delete;
  Sample& operator=(const Sample&) = delete;
};

std::unique_ptr<Sample> augment_sample(const SceneData& scene, std::mt19937_64& rng, const AugmentConfig& config);

// Adds N(0, sigma^2) to every valid depth value.
void add_depth_noise(DepthMap& depth, double sigma, std::mt19937_64& rng);

struct TrainingConfig {
  TrackerConfig model;
  LossConfig loss;
  AugmentConfig augment;
  AdamWConfig optimizer;
  int steps = 5000;
  int warmup_steps = 100;
  double min_lr_ratio = 0.1;  // cosine decay floor
  double grad_clip = 1.0;
  int log_every = 10;
  int checkpoint_every = 500;
  uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

nlohmann::json training_config_to_json(const TrainingConfig& config);
TrainingConfig training_config_from_json(const nlohmann::json& j);

struct StepLosses {
  double loss = 0;
  double loss_xyz = 0;
  double loss_vis = 0;
  double grad_norm = 0;
};

// Learning rate at a 0-based step: linear warmup then cosine decay.
double learning_rate(const TrainingConfig& config, int64_t step);

// Loss of one sample through every window (graph kept for backward).
struct SampleLoss {
  Tensor total, xyz, vis;
};
SampleLoss sample_loss(const TrackerModel& model, const Sample& sample, const TrainingConfig& config);

// Forward through all windows, one backward pass, clipping and one AdamW
// step. Throws NumericDivergence naming the step on a non-finite loss.
StepLosses unrolled_train_step(TrackerModel& model, const Sample& sample, OptimState& optim,
                               const TrainingConfig& config);

// Checkpoint = parameters + optimizer state.
void save_training_checkpoint(const TrackerModel& model, const OptimState& optim, const fs::path& path);
void load_training_checkpoint(TrackerModel& model, OptimState& optim, const fs::path& path);

struct TrainRun {
  fs::path checkpoint;  // written every checkpoint_every steps and at the end
  fs::path log_csv;     // step,loss,loss_xyz,loss_vis
  bool resume = false;  // continue from `checkpoint` if it exists
  // Stop (with a checkpoint) once this many steps are done; the schedule
  // still follows config.steps. Negative = run to the end.
  int64_t stop_after = -1;
};

// Trains on the given scenes. Sample for step k is drawn with an RNG seeded
// from (seed, k), so a resumed run repeats the uninterrupted one. The
// callback, when set, sees every step's losses.
void train(const TrainingConfig& config, const std::vector<SceneData>& scenes, const TrainRun& run,
           const std::function<void(int64_t, const StepLosses&)>& on_step = {});

}  // namespace mvt
