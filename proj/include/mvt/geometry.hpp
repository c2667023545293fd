#pragma once

// Pinhole cameras with world->camera extrinsics. Pixel (u, v) addresses the
// center of column u, row v; the image spans [-0.5, W-0.5) x [-0.5, H-0.5).

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <limits>
#include <vector>

namespace mvt {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct Camera {
  Mat3 K = Mat3::Identity();
  Mat4 E = Mat4::Identity();  // world -> camera
  int width = 0;
  int height = 0;
  int view_id = 0;

  Mat3 rotation() const { return E.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return E.topRightCorner<3, 1>(); }
  // Camera center in world coordinates.
  Vec3 center() const { return -rotation().transpose() * translation(); }
};

// Throws ValidationError when K is not an upper-triangular intrinsic matrix
// with positive focal lengths or E is not a proper rigid transform.
void validate_camera(const Camera& cam);

Mat4 make_extrinsics(const Mat3& rotation, const Vec3& translation);
// World->camera extrinsics of a camera at `eye` looking at `target`
// (camera x right, y down, z forward).
Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& world_up = Vec3::UnitZ());
Mat3 intrinsics(double fx, double fy, double cx, double cy);

bool pixel_in_bounds(const Camera& cam, const Vec2& pixel);

// x = E^-1 (K^-1 (u, v, 1)^T * depth). Throws ValidationError for
// non-positive depth or a pixel outside the image.
Vec3 unproject_pixel(const Camera& cam, const Vec2& pixel, double depth);

struct Projection {
  Vec2 pixel = Vec2::Zero();
  double depth = 0;  // camera-space z
  bool behind_camera = false;
  bool in_bounds = false;
};

Projection project_point(const Camera& cam, const Vec3& world);

// x' = scale * R x + t
struct Similarity {
  double scale = 1;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return scale * (rotation * x) + translation; }
  static Similarity translate(const Vec3& t) { return {1, Mat3::Identity(), t}; }
};

// outer o inner: x -> outer(inner(x)).
Similarity compose(const Similarity& outer, const Similarity& inner);

// Camera observing the transformed world exactly as `cam` observes the
// original one: same pixels, camera-space depths multiplied by S.scale.
Camera apply_similarity(const Camera& cam, const Similarity& S);

struct DepthMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major; NaN marks an invalid pixel

  DepthMap() = default;
  DepthMap(int h, int w) : height(h), width(w), values(static_cast<size_t>(h) * w, std::numeric_limits<float>::quiet_NaN()) {}

  float at(int row, int col) const { return values[static_cast<size_t>(row) * width + col]; }
  float& at(int row, int col) { return values[static_cast<size_t>(row) * width + col]; }
  bool valid(int row, int col) const {
    const float d = at(row, col);
    return std::isfinite(d) && d > 0;
  }
  size_t valid_count() const;
};

}  // namespace mvt
