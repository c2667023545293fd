#include "mvt/geometry.hpp"

#include <string>

#include "mvt/errors.hpp"

namespace mvt {

void validate_camera(const Camera& cam) {
  const Mat3& K = cam.K;
  if (K(1, 0) != 0 || K(2, 0) != 0 || K(2, 1) != 0 || K(2, 2) != 1) {
    throw ValidationError("camera " + std::to_string(cam.view_id) + ": K must be upper-triangular with K[2][2] = 1");
  }
  if (!(K(0, 0) > 0) || !(K(1, 1) > 0)) {
    throw ValidationError("camera " + std::to_string(cam.view_id) + ": focal lengths must be positive");
  }
  const Mat3 R = cam.rotation();
  if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-5 || std::abs(R.determinant() - 1) > 1e-5) {
    throw ValidationError("camera " + std::to_string(cam.view_id) + ": extrinsic rotation is not orthonormal");
  }
  if (cam.E.row(3) != Eigen::RowVector4d(0, 0, 0, 1)) {
    throw ValidationError("camera " + std::to_string(cam.view_id) + ": extrinsics last row must be (0, 0, 0, 1)");
  }
  if (!cam.E.allFinite() || !K.allFinite()) {
    throw ValidationError("camera " + std::to_string(cam.view_id) + ": non-finite parameters");
  }
}

Mat4 make_extrinsics(const Mat3& rotation, const Vec3& translation) {
  Mat4 E = Mat4::Identity();
  E.topLeftCorner<3, 3>() = rotation;
  E.topRightCorner<3, 1>() = translation;
  return E;
}

Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& world_up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(world_up);
  if (x.norm() < 1e-9) x = z.cross(Vec3::UnitY());
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 R;
  R.row(0) = x.transpose();
  R.row(1) = y.transpose();
  R.row(2) = z.transpose();
  return make_extrinsics(R, -R * eye);
}

Mat3 intrinsics(double fx, double fy, double cx, double cy) {
  Mat3 K;
  K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return K;
}

bool pixel_in_bounds(const Camera& cam, const Vec2& pixel) {
  return pixel.x() >= -0.5 && pixel.x() < cam.width - 0.5 && pixel.y() >= -0.5 && pixel.y() < cam.height - 0.5;
}

Vec3 unproject_pixel(const Camera& cam, const Vec2& pixel, double depth) {
  if (!(depth > 0) || !std::isfinite(depth)) {
    throw ValidationError("unproject_pixel: depth must be positive and finite, got " + std::to_string(depth));
  }
  if (cam.width > 0 && cam.height > 0 && !pixel_in_bounds(cam, pixel)) {
    throw ValidationError("unproject_pixel: pixel (" + std::to_string(pixel.x()) + ", " + std::to_string(pixel.y()) +
                          ") outside image");
  }
  const Vec3 ray = cam.K.triangularView<Eigen::Upper>().solve(Vec3(pixel.x(), pixel.y(), 1.0));
  const Vec3 cam_point = ray * depth;
  return cam.rotation().transpose() * (cam_point - cam.translation());
}

Projection project_point(const Camera& cam, const Vec3& world) {
  Projection p;
  const Vec3 c = cam.rotation() * world + cam.translation();
  p.depth = c.z();
  if (!(c.z() > 0)) {
    p.behind_camera = true;
    return p;
  }
  const Vec3 h = cam.K * (c / c.z());
  p.pixel = h.head<2>();
  p.in_bounds = pixel_in_bounds(cam, p.pixel);
  return p;
}

Similarity compose(const Similarity& outer, const Similarity& inner) {
  return {outer.scale * inner.scale, outer.rotation * inner.rotation,
          outer.scale * (outer.rotation * inner.translation) + outer.translation};
}

Camera apply_similarity(const Camera& cam, const Similarity& S) {
  if (!(S.scale > 0)) throw ValidationError("apply_similarity: scale must be positive");
  Camera out = cam;
  const Mat3 R = cam.rotation() * S.rotation.transpose();
  const Vec3 t = S.scale * cam.translation() - R * S.translation;
  out.E = make_extrinsics(R, t);
  return out;
}

size_t DepthMap::valid_count() const {
  size_t n = 0;
  for (float d : values) n += (std::isfinite(d) && d > 0);
  return n;
}

}  // namespace mvt
