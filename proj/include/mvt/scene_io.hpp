#pragma once

// On-disk scene format: manifest.json, cameras.json, rgb/view<k>/frame<t>.ppm,
// depth/view<k>/frame<t>.mvd, gt_tracks.csv and queries.csv.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mvt/geometry.hpp"
#include "mvt/image.hpp"

namespace mvt {

namespace fs = std::filesystem;

// Intrinsics plus either one static extrinsic or one per frame.
struct ViewCameras {
  int view_id = 0;
  int width = 0;
  int height = 0;
  Mat3 K = Mat3::Identity();
  std::vector<Mat4> E;

  bool is_static() const { return E.size() == 1; }
  Camera at(int frame) const;
};

struct SceneManifest {
  std::string scene_id;
  std::string units = "scene_units";
  int num_views = 0;
  int num_frames = 0;
  int width = 0;
  int height = 0;
  uint64_t seed = 0;
  int num_tracks = 0;
  double threshold_scale = 1.0;
  double depth_noise_unit = 0.01;
};

struct Query {
  int track_id = 0;
  int query_frame = 0;
  Vec3 xyz = Vec3::Zero();
};

// Per-frame positions and visibility of one track. confidence is only
// filled for predictions.
struct TrackRecord {
  int track_id = 0;
  int query_frame = 0;
  std::vector<Vec3> positions;
  std::vector<uint8_t> visible;
  std::vector<double> confidence;
};

struct SceneData {
  fs::path dir;
  SceneManifest manifest;
  std::vector<ViewCameras> cameras;
  std::vector<std::vector<RgbImage>> rgb;    // [view][frame]
  std::vector<std::vector<DepthMap>> depth;  // [view][frame]
  std::vector<Query> queries;
  std::vector<TrackRecord> ground_truth;     // empty when gt_tracks.csv is absent

  int num_frames() const { return manifest.num_frames; }
  int num_views() const { return static_cast<int>(cameras.size()); }
};

struct LoadOptions {
  bool images = true;
  bool depth = true;
  bool ground_truth = true;
  std::string depth_dir = "depth";  // alternative directory for estimated depth
};

void write_ppm(const fs::path& path, const RgbImage& image);
RgbImage read_ppm(const fs::path& path);

std::vector<char> encode_mvd(const DepthMap& depth);
DepthMap decode_mvd(const std::vector<char>& bytes, const std::string& origin = "<memory>");
void write_mvd(const fs::path& path, const DepthMap& depth);
DepthMap read_mvd(const fs::path& path);

std::string cameras_to_json(const std::vector<ViewCameras>& cams);
std::vector<ViewCameras> read_cameras(const fs::path& path);
std::string manifest_to_json(const SceneManifest& m);
SceneManifest read_manifest(const fs::path& path);

void write_queries_csv(const fs::path& path, const std::vector<Query>& queries);
std::vector<Query> read_queries_csv(const fs::path& path);
// Header track_id,t,x,y,z,visible; one row per track and frame.
void write_gt_tracks_csv(const fs::path& path, const std::vector<TrackRecord>& tracks);
// Header track_id,t,x,y,z,visible,confidence.
void write_pred_tracks_csv(const fs::path& path, const std::vector<TrackRecord>& tracks);
// Reads either track CSV flavour. Every track must cover frames 0..max_t.
std::vector<TrackRecord> read_tracks_csv(const fs::path& path);

SceneData load_scene(const fs::path& dir, const LoadOptions& options = {});

// Scene directories of a dataset: the "scenes" list of dataset.json when
// present, otherwise every subdirectory holding a manifest.json, sorted.
std::vector<fs::path> dataset_scene_dirs(const fs::path& dir);
std::vector<SceneData> load_dataset(const fs::path& dir, const LoadOptions& options = {});

std::vector<char> read_file(const fs::path& path);
void write_file(const fs::path& path, const std::string& text);
void write_file(const fs::path& path, const std::vector<char>& bytes);

fs::path rgb_path(const fs::path& scene_dir, int view, int frame);
fs::path depth_path(const fs::path& scene_dir, int view, int frame, const std::string& depth_dir = "depth");

}  // namespace mvt
