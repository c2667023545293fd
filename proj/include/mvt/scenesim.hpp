#pragma once

// Deterministic synthetic multi-view scenes: rigid spheres and boxes moving
// piecewise-linearly over a checkered ground plane, rendered by analytic ray
// casting. Ground-truth tracks are surface points advected with their body;
// a track is visible at frame t iff it is in-frustum and unoccluded in at
// least one camera.

#include <cstdint>
#include <limits>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mvt/geometry.hpp"
#include "mvt/image.hpp"

namespace mvt {

enum class ShapeKind { kSphere, kBox, kPlane };

struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  Vec3 apply(const Vec3& local) const { return rotation * local + translation; }
  Vec3 inverse_apply(const Vec3& world) const { return rotation.transpose() * (world - translation); }
};

// Piecewise-linear yaw (about world z) and translation between keyframes;
// constant before the first and after the last key.
struct RigidMotion {
  struct Key {
    int frame = 0;
    Vec3 translation = Vec3::Zero();
    double yaw = 0;
  };
  std::vector<Key> keys;

  Pose at(int frame) const;
  bool is_static() const;
};

struct Albedo {
  Vec3 color_a{0.8, 0.2, 0.2};
  Vec3 color_b{0.4, 0.1, 0.1};
  double checker_frequency = 4;  // cells per unit length
  double noise_amplitude = 0.08;
  double noise_phase = 0;

  Vec3 at(const Vec3& local) const;
};

struct RigidBody {
  int id = 0;
  ShapeKind kind = ShapeKind::kSphere;
  double radius = 0.25;               // sphere
  Vec3 half_extents{0.2, 0.2, 0.2};   // box, in the body frame
  double plane_height = 0;            // ground plane z
  double plane_half_extent = std::numeric_limits<double>::infinity();  // |x|, |y| bound of the plane
  RigidMotion motion;
  Albedo albedo;

  double surface_area() const;
};

struct Scene {
  std::vector<RigidBody> bodies;
  int num_frames = 1;
};

struct RayHit {
  double t = 0;
  int body = -1;  // index into Scene::bodies
  Vec3 normal = Vec3::Zero();
  Vec3 local = Vec3::Zero();
};

// Nearest hit with t in (t_min, t_max) along origin + t * direction.
std::optional<RayHit> cast_ray(const Scene& scene, int frame, const Vec3& origin, const Vec3& direction,
                               double t_min, double t_max);

struct RenderedView {
  RgbImage rgb;
  DepthMap depth;
  std::vector<int> body_index;  // per pixel, -1 where nothing was hit
};

// One rendering per camera at the cameras' own resolution. Depth is the
// camera-space z of the nearest hit.
std::vector<RenderedView> render_views(const Scene& scene, const std::vector<Camera>& cameras, int frame);

struct GroundTruthTrack {
  int track_id = 0;
  int query_frame = 0;
  int body_id = -1;
  Vec3 local_point = Vec3::Zero();
  std::vector<Vec3> positions;     // per frame
  std::vector<uint8_t> visible;    // per frame, any-view visibility
};

constexpr double kOcclusionEpsilon = 1e-4;

// Unoccluded and in-frustum in this camera.
bool point_visible_in(const Scene& scene, const Camera& cam, int frame, const Vec3& world);
// Visible in at least one of `cameras`.
bool point_visible(const Scene& scene, const std::vector<Camera>& cameras, int frame, const Vec3& world);

// Uniform-by-area surface sample on one body (sphere or box).
Vec3 sample_surface(const RigidBody& body, std::mt19937_64& rng);

// Samples n_tracks surface points uniformly by area over the non-plane
// bodies and labels them. The query frame is drawn among visible frames in
// the first half of the video.
std::vector<GroundTruthTrack> sample_tracks(const Scene& scene, const std::vector<Camera>& cameras, int n_tracks,
                                            uint64_t seed);

struct SimConfig {
  int num_scenes = 4;
  int num_views = 4;
  int num_frames = 24;
  int width = 64;
  int height = 64;
  int num_tracks = 32;
  int min_bodies = 3;
  int max_bodies = 5;
  double max_speed = 0.03;       // scene units per frame
  double max_yaw_rate = 0.04;    // radians per frame
  double camera_distance = 3.0;
  double ground_half_extent = 2.0;  // finite floor; beyond it depth is invalid
  double field_of_view_deg = 50;
  // Metric thresholds are expressed as multiples of these reference values
  // times threshold_scale.
  double threshold_scale = 0.4;
  uint64_t seed = 0;

  void validate() const;
};

// Stream seed for (base, index...) sub-tasks.
uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0);

Scene make_random_scene(const SimConfig& config, std::mt19937_64& rng);
std::vector<Camera> make_random_cameras(const SimConfig& config, std::mt19937_64& rng);

struct GeneratedScene {
  std::string name;
  Scene scene;
  std::vector<Camera> cameras;
  std::vector<GroundTruthTrack> tracks;
};

GeneratedScene generate_scene(const SimConfig& config, int index);

// Writes scene_<id>/ directories and a dataset.json index under out_dir.
// Returns the dataset manifest JSON text.
std::string generate_dataset(const SimConfig& config, const std::filesystem::path& out_dir, int threads = 1);

}  // namespace mvt
