#pragma once

// Track metrics: MTE, occlusion accuracy, location accuracy (delta) and
// average Jaccard, computed per track, averaged per scene, then per dataset.
// Only frames t >= the track's query frame are scored.

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvt/scene_io.hpp"

namespace mvt {

struct EvalConfig {
  std::vector<double> thresholds;  // strictly increasing, positive
  std::vector<double> pixel_thresholds = {1, 2, 4, 8, 16};

  void validate() const;
};

// 0.05 * 2^k scene units for k = 0..4, times `scale`.
std::vector<double> reference_thresholds(double scale);

// Even counts use the mean of the two central values. Empty -> nullopt.
std::optional<double> median(std::vector<double> values);

// Per-track metrics over frames [first, T). nullopt when the track has no
// GT-visible frame there.
std::optional<double> mte(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                          const std::vector<uint8_t>& gt_vis, int first = 0);
double occlusion_accuracy(const std::vector<uint8_t>& pred_vis, const std::vector<uint8_t>& gt_vis, int first = 0);
// Fraction of GT-visible frames with error strictly below x.
std::optional<double> delta(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                            const std::vector<uint8_t>& gt_vis, double x, int first = 0);
// Jaccard at one threshold; nullopt when no frame is visible in GT or
// prediction.
std::optional<double> jaccard(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                              const std::vector<uint8_t>& pred_vis, const std::vector<uint8_t>& gt_vis, double x,
                              int first = 0);
// Mean of jaccard over thresholds.
std::optional<double> average_jaccard(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                                      const std::vector<uint8_t>& pred_vis, const std::vector<uint8_t>& gt_vis,
                                      const std::vector<double>& thresholds, int first = 0);

struct TrackMetrics {
  int track_id = 0;
  std::optional<double> mte;
  double oa = 0;
  std::vector<double> delta;  // per threshold; empty when excluded
  std::vector<double> aj;     // per threshold; empty when excluded
  std::optional<double> delta_avg;
  std::optional<double> aj_avg;
};

struct Aggregate {
  std::optional<double> mte, oa, delta_avg, aj;
  std::vector<double> delta, aj_per_threshold;  // empty when nothing scored
};

struct SceneMetrics {
  std::string scene;
  std::vector<TrackMetrics> tracks;
  Aggregate mean;
  int excluded_spatial = 0;  // tracks without GT-visible frames
  int excluded_jaccard = 0;  // tracks with an empty Jaccard denominator
};

struct MetricsReport {
  std::vector<double> thresholds;
  std::vector<SceneMetrics> scenes;
  Aggregate dataset;  // mean of scene means
  int excluded_spatial = 0;
  int excluded_jaccard = 0;
};

// Tracks are matched by track_id; the query frame comes from the GT record.
// Throws ValidationError listing GT ids without a prediction.
SceneMetrics evaluate_scene(const std::string& scene, const std::vector<TrackRecord>& pred,
                            const std::vector<TrackRecord>& gt, const EvalConfig& config);
MetricsReport aggregate_report(std::vector<SceneMetrics> scenes, const EvalConfig& config);

nlohmann::json report_to_json(const MetricsReport& report);
// scene,track,metric,value; aggregates use track "mean".
std::string report_to_csv(const MetricsReport& report);

// Pixel tracks of every 3D track in one view. valid = 0 where the point is
// behind the camera.
struct PixelTrack {
  std::vector<Vec2> pixels;
  std::vector<uint8_t> valid;
};
std::vector<PixelTrack> project_tracks_2d(const std::vector<TrackRecord>& tracks, const ViewCameras& cams);

// Pixel delta per threshold for one view: per track over GT-visible frames
// (t >= query frame) valid in both projections, then averaged over tracks.
std::vector<double> delta_2d_view(const std::vector<TrackRecord>& pred, const std::vector<TrackRecord>& gt,
                                  const ViewCameras& cams, const std::vector<double>& pixel_thresholds);
// delta_2d_view averaged over views.
std::vector<double> delta_2d(const std::vector<TrackRecord>& pred, const std::vector<TrackRecord>& gt,
                             const std::vector<ViewCameras>& cams, const std::vector<double>& pixel_thresholds);

}  // namespace mvt
