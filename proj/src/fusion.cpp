#include "mvt/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <queue>
#include <string>

#include "mvt/scene_io.hpp"

namespace mvt {

namespace {

// (squared distance, index) ordered lexicographically; the max-heap top is
// the current worst of the k best.
using Candidate = std::pair<double, int64_t>;

std::vector<Neighbor> finish(std::priority_queue<Candidate>& heap) {
  std::vector<Neighbor> out(heap.size());
  for (size_t i = out.size(); i-- > 0;) {
    out[i] = {heap.top().second, std::sqrt(heap.top().first)};
    heap.pop();
  }
  return out;
}

void offer(std::priority_queue<Candidate>& heap, size_t k, const Candidate& c) {
  if (heap.size() < k) {
    heap.push(c);
  } else if (c < heap.top()) {
    heap.pop();
    heap.push(c);
  }
}

}  // namespace

std::vector<Neighbor> knn_exhaustive(const std::vector<Vec3>& points, const Vec3& q, int k) {
  if (k < 1) throw ValidationError("knn: K must be >= 1");
  if (points.empty()) throw EmptyCloudError("knn: empty cloud");
  std::priority_queue<Candidate> heap;
  for (size_t i = 0; i < points.size(); ++i) {
    offer(heap, static_cast<size_t>(k), {(points[i] - q).squaredNorm(), static_cast<int64_t>(i)});
  }
  return finish(heap);
}

SpatialIndex::SpatialIndex(const std::vector<Vec3>* points) : points_(points) {
  const auto& pts = *points;
  const size_t n = pts.size();
  if (n < kExhaustiveBelow) return;
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  // Mean nearest-neighbour spacing from an evenly strided sample.
  const size_t samples = 64;
  double spacing = 0;
  int counted = 0;
  for (size_t s = 0; s < samples; ++s) {
    const size_t i = s * n / samples;
    double best = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < n; ++j) {
      if (j != i) best = std::min(best, (pts[j] - pts[i]).squaredNorm());
    }
    if (best > 0 && std::isfinite(best)) {
      spacing += std::sqrt(best);
      ++counted;
    }
  }
  const Vec3 extent = hi - lo;
  const double diag = extent.norm();
  if (counted == 0 || !(diag > 0)) return;  // degenerate: all points coincide
  cell_ = spacing / counted;
  // Keep the grid at most ~2 cells per point.
  auto cells_for = [&](double h) {
    double total = 1;
    for (int a = 0; a < 3; ++a) total *= std::floor(extent[a] / h) + 1;
    return total;
  };
  while (cells_for(cell_) > 2.0 * static_cast<double>(n)) cell_ *= 1.5;
  origin_ = lo;
  for (int a = 0; a < 3; ++a) dims_[a] = static_cast<int>(std::floor(extent[a] / cell_)) + 1;
  const int64_t total = static_cast<int64_t>(dims_[0]) * dims_[1] * dims_[2];
  std::vector<int64_t> cell_id(n);
  cell_start_.assign(static_cast<size_t>(total) + 1, 0);
  for (size_t i = 0; i < n; ++i) {
    cell_id[i] = (cell_of(pts[i], 2) * dims_[1] + cell_of(pts[i], 1)) * dims_[0] + cell_of(pts[i], 0);
    ++cell_start_[cell_id[i] + 1];
  }
  for (int64_t c = 0; c < total; ++c) cell_start_[c + 1] += cell_start_[c];
  cell_points_.resize(n);
  std::vector<int64_t> fill(cell_start_.begin(), cell_start_.end() - 1);
  for (size_t i = 0; i < n; ++i) cell_points_[fill[cell_id[i]]++] = static_cast<int64_t>(i);
}

int64_t SpatialIndex::cell_of(const Vec3& p, int axis) const {
  const double f = std::floor((p[axis] - origin_[axis]) / cell_);
  return static_cast<int64_t>(std::clamp(f, 0.0, static_cast<double>(dims_[axis] - 1)));
}

std::vector<Neighbor> SpatialIndex::knn(const Vec3& q, int k) const {
  if (k < 1) throw ValidationError("knn: K must be >= 1");
  if (!points_ || points_->empty()) throw EmptyCloudError("knn: empty cloud");
  if (!uses_grid()) return knn_exhaustive(*points_, q, k);
  const auto& pts = *points_;
  const size_t kk = std::min(static_cast<size_t>(k), pts.size());
  int64_t center[3];
  for (int a = 0; a < 3; ++a) center[a] = cell_of(q, a);
  std::priority_queue<Candidate> heap;
  const int64_t max_ring = std::max({dims_[0], dims_[1], dims_[2]});
  // Floating-point slack so that a point sitting exactly on a face is never
  // assumed to be farther than it is.
  const double margin = 1e-9 * (1 + cell_ + origin_.cwiseAbs().maxCoeff());
  for (int64_t r = 0; r <= max_ring; ++r) {
    int64_t lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max<int64_t>(0, center[a] - r);
      hi[a] = std::min<int64_t>(dims_[a] - 1, center[a] + r);
    }
    for (int64_t z = lo[2]; z <= hi[2]; ++z) {
      for (int64_t y = lo[1]; y <= hi[1]; ++y) {
        const bool face_zy = std::abs(z - center[2]) == r || std::abs(y - center[1]) == r;
        for (int64_t x = lo[0]; x <= hi[0]; ++x) {
          // Only the shell at Chebyshev distance r is new.
          if (!face_zy && std::abs(x - center[0]) != r) continue;
          const int64_t c = (z * dims_[1] + y) * dims_[0] + x;
          for (int64_t i = cell_start_[c]; i < cell_start_[c + 1]; ++i) {
            const int64_t p = cell_points_[i];
            offer(heap, kk, {(pts[p] - q).squaredNorm(), p});
          }
        }
      }
    }
    // Everything not yet visited lies beyond one of the region's inner faces.
    double bound = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (lo[a] > 0) bound = std::min(bound, std::max(0.0, q[a] - (origin_[a] + lo[a] * cell_)));
      if (hi[a] < dims_[a] - 1) bound = std::min(bound, std::max(0.0, origin_[a] + (hi[a] + 1) * cell_ - q[a]));
    }
    if (!std::isfinite(bound)) break;  // whole grid visited
    if (heap.size() == kk && std::sqrt(heap.top().first) < bound - margin) break;
  }
  return finish(heap);
}

FeatureBank make_feature_bank(const std::vector<Tensor>& pyramid) {
  if (pyramid.empty()) throw ValidationError("feature bank: empty pyramid");
  FeatureBank bank;
  bank.num_images = static_cast<int>(pyramid[0].dim(0));
  bank.dim = static_cast<int>(pyramid[0].dim(1));
  for (const Tensor& level : pyramid) {
    const int64_t B = level.dim(0), d = level.dim(1), h = level.dim(2), w = level.dim(3);
    bank.heights.push_back(static_cast<int>(h));
    bank.widths.push_back(static_cast<int>(w));
    bank.levels.push_back(reshape(permute(level, {0, 2, 3, 1}), {B * h * w, d}));
  }
  return bank;
}

std::vector<Neighbor> FusedPointCloud::knn_query(const Vec3& q, int k) const {
  if (positions.empty()) {
    throw EmptyCloudError("knn_query: empty cloud at frame " + std::to_string(frame) + " scale " +
                          std::to_string(scale));
  }
  return index.knn(q, k);
}

std::vector<std::unique_ptr<FusedPointCloud>> fuse_views(const std::vector<const DepthMap*>& depths,
                                                         const std::vector<Camera>& cameras, const FeatureBank& bank,
                                                         int first_image, int frame) {
  if (depths.size() != cameras.size() || depths.empty()) {
    throw ValidationError("fuse_views: " + std::to_string(depths.size()) + " depth maps for " +
                          std::to_string(cameras.size()) + " cameras");
  }
  if (first_image < 0 || first_image + static_cast<int>(cameras.size()) > bank.num_images) {
    throw ValidationError("fuse_views: feature bank has no images for frame " + std::to_string(frame));
  }
  size_t any_valid = 0;
  for (size_t v = 0; v < cameras.size(); ++v) {
    if (v > 0 && cameras[v].view_id <= cameras[v - 1].view_id) {
      throw ValidationError("fuse_views: views must be in ascending view_id order");
    }
    any_valid += depths[v]->valid_count();
  }
  if (any_valid == 0) throw EmptyCloudError("fuse_views: no valid depth in any view at frame " + std::to_string(frame));

  std::vector<std::unique_ptr<FusedPointCloud>> clouds;
  for (size_t s = 0; s < bank.levels.size(); ++s) {
    auto cloud = std::make_unique<FusedPointCloud>();
    cloud->frame = frame;
    cloud->scale = static_cast<int>(s);
    const int h = bank.heights[s], w = bank.widths[s];
    for (size_t v = 0; v < cameras.size(); ++v) {
      const DepthMap& depth = *depths[v];
      if (depth.width < w || depth.height < h || depth.width % w != 0 || depth.height % h != 0 ||
          depth.width / w != depth.height / h) {
        throw ValidationError("fuse_views: depth " + std::to_string(depth.width) + "x" +
                              std::to_string(depth.height) + " does not tile a " + std::to_string(w) + "x" +
                              std::to_string(h) + " feature grid");
      }
      const int stride = depth.width / w;
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
          const int pr = r * stride + stride / 2, pc = c * stride + stride / 2;
          if (!depth.valid(pr, pc)) continue;
          cloud->positions.push_back(unproject_pixel(cameras[v], Vec2(pc, pr), depth.at(pr, pc)));
          cloud->origins.push_back({cameras[v].view_id, r, c});
          cloud->feature_rows.push_back(bank.row(static_cast<int>(s), first_image + static_cast<int>(v), r, c));
        }
      }
    }
    cloud->build_index();
    clouds.push_back(std::move(cloud));
  }
  return clouds;
}

TrackAnchor init_track_feature(const FusedPointCloud& cloud, const Vec3& query) {
  const auto nn = cloud.knn_query(query, 1);
  TrackAnchor a;
  a.point = nn[0].index;
  a.position = cloud.positions[a.point];
  a.feature_row = cloud.feature_rows[a.point];
  a.distance = nn[0].distance;
  return a;
}

void write_cloud_csv(const std::filesystem::path& path, const FusedPointCloud& cloud) {
  std::string s = "x,y,z,view,row,col\n";
  char buf[160];
  for (size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.positions[i];
    const PointOrigin& o = cloud.origins[i];
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%d,%d,%d\n", p.x(), p.y(), p.z(), o.view_id, o.row, o.col);
    s += buf;
  }
  write_file(path, s);
}

}  // namespace mvt
