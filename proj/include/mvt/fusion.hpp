#pragma once

// Fused multi-view point clouds per (frame, scale) and an exact kNN index.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "mvt/errors.hpp"
#include "mvt/geometry.hpp"
#include "mvt/tensor.hpp"

namespace mvt {

class EmptyCloudError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct Neighbor {
  int64_t index = -1;  // position in the cloud
  double distance = 0;
};

// Exact k-nearest-neighbour search over a fixed point set. Ties in distance
// are broken by ascending point index. Uses a uniform voxel grid whose cell
// size is the estimated mean nearest-neighbour spacing; small sets are
// scanned exhaustively.
class SpatialIndex {
 public:
  static constexpr size_t kExhaustiveBelow = 512;

  SpatialIndex() = default;
  explicit SpatialIndex(const std::vector<Vec3>* points);

  std::vector<Neighbor> knn(const Vec3& q, int k) const;
  bool uses_grid() const { return !cell_start_.empty(); }
  double cell_size() const { return cell_; }

 private:
  const std::vector<Vec3>* points_ = nullptr;
  double cell_ = 0;
  Vec3 origin_ = Vec3::Zero();
  int dims_[3] = {0, 0, 0};
  std::vector<int64_t> cell_start_;  // CSR over cells, size cells + 1
  std::vector<int64_t> cell_points_;

  int64_t cell_of(const Vec3& p, int axis) const;
};

// Brute-force reference used by tests and tiny clouds.
std::vector<Neighbor> knn_exhaustive(const std::vector<Vec3>& points, const Vec3& q, int k);

struct PointOrigin {
  int view_id = 0;
  int row = 0;  // feature-grid cell at the cloud's scale
  int col = 0;
};

// Per-scale feature banks for a batch of images: level s is
// [images * h_s * w_s, d], row = (image * h_s + r) * w_s + c.
struct FeatureBank {
  std::vector<Tensor> levels;
  std::vector<int> heights, widths;
  int num_images = 0;
  int dim = 0;

  int64_t row(int scale, int image, int r, int c) const {
    return (static_cast<int64_t>(image) * heights[scale] + r) * widths[scale] + c;
  }
};

// pyramid[s] is [images, d, h_s, w_s] as produced by build_pyramid.
FeatureBank make_feature_bank(const std::vector<Tensor>& pyramid);

struct FusedPointCloud {
  int frame = 0;
  int scale = 0;
  std::vector<Vec3> positions;
  std::vector<PointOrigin> origins;
  std::vector<int64_t> feature_rows;  // rows of FeatureBank::levels[scale]
  SpatialIndex index;

  FusedPointCloud() = default;
  FusedPointCloud(const FusedPointCloud&) = delete;
  FusedPointCloud& operator=(const FusedPointCloud&) = delete;

  size_t size() const { return positions.size(); }
  // Sorted by distance, ties by (view, row, col); min(k, size) entries.
  std::vector<Neighbor> knn_query(const Vec3& q, int k) const;
  void build_index() { index = SpatialIndex(&positions); }
};

// One cloud per scale for a single frame. Views must be in ascending
// view_id order; view v reads features from bank image `first_image + v`.
// A scale-s cell (r, c) samples the depth pixel nearest its center,
// (c * stride + stride / 2, r * stride + stride / 2) with stride =
// depth width / w_s, and is skipped when that depth is invalid.
std::vector<std::unique_ptr<FusedPointCloud>> fuse_views(const std::vector<const DepthMap*>& depths,
                                                         const std::vector<Camera>& cameras, const FeatureBank& bank,
                                                         int first_image, int frame);

struct TrackAnchor {
  int64_t point = -1;
  Vec3 position = Vec3::Zero();
  int64_t feature_row = -1;
  double distance = 0;
};

// Nearest scale-0 cloud point to the query; its feature initializes f.
TrackAnchor init_track_feature(const FusedPointCloud& cloud, const Vec3& query);

// x,y,z,view,row,col
void write_cloud_csv(const std::filesystem::path& path, const FusedPointCloud& cloud);

}  // namespace mvt
