#pragma once

// Iterative transformer refinement of 3D tracks over sliding windows.

#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mvt/correlation.hpp"
#include "mvt/encoder.hpp"
#include "mvt/fusion.hpp"
#include "mvt/scene_io.hpp"

namespace mvt {

struct TrackerConfig {
  EncoderConfig encoder;  // encoder.feature_dim is the track feature size d
  CorrelationConfig correlation;
  int width = 256;
  int heads = 6;
  int blocks = 6;
  int virtual_tracks = 64;
  int mlp_hidden = 1024;
  int num_freqs = 10;
  int window = 12;
  int iterations = 4;
  // Displacements are multiplied by this before the sinusoidal code.
  double displacement_scale = 1.0;
  // Multiplies the position head output.
  double delta_scale = 1.0;
  // Tokens see positions as constants; gradients still reach every update
  // through the running sum of position residuals.
  bool detach_positions = true;

  int feature_dim() const { return encoder.feature_dim; }
  int levels() const { return encoder.levels; }
  int token_length() const;
  void validate() const;
};

nlohmann::json tracker_config_to_json(const TrackerConfig& config);
// Missing keys keep their defaults.
TrackerConfig tracker_config_from_json(const nlohmann::json& j);

struct RefinerOutput {
  Tensor delta_pos;   // [N * T, 3], before delta_scale
  Tensor delta_feat;  // [N * T, d]
};

// Encoder, refiner transformer and visibility projection under one
// parameter list ("encoder.*", "refiner.*", "visibility.*").
class TrackerModel {
 public:
  explicit TrackerModel(const TrackerConfig& config, uint64_t seed = 0);
  TrackerModel(const TrackerModel&) = delete;
  TrackerModel& operator=(const TrackerModel&) = delete;

  const TrackerConfig& config() const { return config_; }
  ParameterList& params() { return params_; }
  const ParameterList& params() const { return params_; }
  const Encoder& encoder() const { return encoder_; }

  // tokens [N * T, token_length] with row n * T + t; `active` has the same
  // layout. Inactive tokens are never attended to.
  RefinerOutput refine(const Tensor& tokens, int num_tracks, int frames, const std::vector<uint8_t>& active) const;
  // [Q, d] -> [Q]
  Tensor visibility_logits(const Tensor& feat) const;

 private:
  struct Block {
    LayerNorm time_norm, time_mlp_norm;
    Attention time_attn;
    Mlp time_mlp;
    LayerNorm virt_query_norm, real_key_norm, virt_mlp_norm;
    Attention virt_from_real;
    Mlp virt_mlp;
    LayerNorm real_query_norm, virt_key_norm, real_mlp_norm;
    Attention real_from_virt;
    Mlp real_mlp;
  };

  TrackerConfig config_;
  ParameterList params_;
  Encoder encoder_;
  Linear input_;
  Tensor virtual_tokens_;  // [V, width]
  std::vector<Block> blocks_;
  LayerNorm out_norm_;
  Linear delta_pos_, delta_feat_;
  Linear visibility_;
};

// Parameters go to `path`; the model config to the sidecar `path` + ".json".
void save_model(const TrackerModel& model, const fs::path& path);
void load_model(TrackerModel& model, const fs::path& path);
// Builds the model described by the sidecar (a tracker config, or a
// training config with a "model" entry) and loads its parameters.
std::unique_ptr<TrackerModel> load_tracker(const fs::path& path);

// Frames of one scene as seen by the selected views (ascending view_id).
struct ClipView {
  std::vector<Camera> cameras;         // per frame
  std::vector<const RgbImage*> rgb;    // per frame
  std::vector<const DepthMap*> depth;  // per frame
};

struct Clip {
  int num_frames = 0;
  std::vector<ClipView> views;
};

// Views are selected by view_id; an empty list selects all of them.
Clip make_clip(const SceneData& scene, const std::vector<int>& view_ids = {});

// Per-clip features and fused clouds. Bank image index = frame * V + view.
struct EncodedClip {
  int num_frames = 0;
  int num_views = 0;
  FeatureBank bank;
  std::vector<std::vector<std::unique_ptr<FusedPointCloud>>> clouds;  // [frame][scale]
};

EncodedClip encode_clip(const TrackerModel& model, const Clip& clip, int threads = 1);

// Tracks present in one window. Row n * length + t holds frame start + t.
// Positions are stored as displacements from each track's query point.
struct WindowState {
  int start = 0;
  int length = 0;
  std::vector<int> tracks;       // indices into the query list
  std::vector<int> query_frame;  // global frame index
  std::vector<Vec3> query_xyz;
  std::vector<uint8_t> active;   // frame >= query frame
  Tensor disp;                   // [N * length, 3]
  Tensor feat;                   // [N * length, d]
  Tensor vis;                    // [N * length] logits

  int num_tracks() const { return static_cast<int>(tracks.size()); }
};

// [N * length, token_length]: sinusoidal displacement code, feature,
// per-scale correlation, visibility logit.
Tensor build_tokens(const TrackerModel& model, const WindowState& state, const EncodedClip& clip);

// Position estimates after each iteration, kept for the training loss.
struct WindowTrace {
  std::vector<Tensor> disp;  // [M] x [N * length, 3]
};

// M refinement iterations; visibility logits are computed after the last
// one. Throws NumericDivergence naming the iteration on a non-finite update.
WindowState refine_window(const TrackerModel& model, const WindowState& initial, const EncodedClip& clip,
                          int iterations, WindowTrace* trace = nullptr);

// (start, length) of each window: one window when frames <= T, otherwise
// ceil((frames - T) / (T / 2)) + 1 windows with stride T / 2.
std::vector<std::pair<int, int>> window_spans(int frames, int window);

struct TrackingResult {
  std::vector<TrackRecord> tracks;  // one per query, in query order
  std::vector<double> logits;       // [queries * frames]
  std::vector<std::pair<int, int>> windows;
  std::vector<WindowState> finals;  // per processed window
  std::vector<WindowTrace> traces;
};

// Runs all windows with state handoff. Frames before a track's query frame
// report the query position, not visible, confidence 0.
TrackingResult run_windowed(const TrackerModel& model, const EncodedClip& clip, const std::vector<Query>& queries,
                            int window, int iterations);

// sigma(logit) >= threshold
std::vector<uint8_t> predict_visibility(std::span<const double> logits, double threshold = 0.5);

}  // namespace mvt
