#pragma once

// kNN feature correlation around a 3D position: per scale, K entries of
// (similarity, offset) in distance order.

#include <vector>

#include "mvt/fusion.hpp"

namespace mvt {

enum class CorrelationEncoding {
  kOffsetOnly,         // (similarity, dx, dy, dz)
  kNoOffset,           // (similarity)
  kOffsetAndLocation,  // (similarity, dx, dy, dz, x, y, z)
};

struct CorrelationConfig {
  int neighbors = 16;
  CorrelationEncoding encoding = CorrelationEncoding::kOffsetOnly;
  // Multiplies offsets (and locations) before they enter the embedding.
  double offset_scale = 1.0;
  // Multiplies dot-product similarities in the embedding.
  double similarity_scale = 1.0;
};

int entry_width(CorrelationEncoding encoding);
int correlation_length(const CorrelationConfig& config, int levels);
const char* encoding_name(CorrelationEncoding encoding);
CorrelationEncoding parse_encoding(const std::string& name);

struct CorrelationEntry {
  bool valid = false;  // false for padding when the cloud has fewer than K points
  int64_t point = -1;
  double similarity = 0;
  Vec3 offset = Vec3::Zero();
  Vec3 location = Vec3::Zero();
};

struct CorrelationSet {
  std::vector<std::vector<CorrelationEntry>> scales;  // [S][K]
};

// Reference (non-differentiable) correlation of one track feature at p.
CorrelationSet correlate(std::span<const Real> feature, const Vec3& p,
                         const std::vector<const FusedPointCloud*>& clouds, const FeatureBank& bank, int k);

// Scales concatenated in order, each K entries flattened per the encoding.
std::vector<Real> embed_correlation(const CorrelationSet& set, const CorrelationConfig& config);

// Neighbours of many query positions in one cloud each (one scale).
// Neighbour coordinates are stored relative to a per-query origin so that
// the differentiable part only sees small, translation-free numbers.
struct NeighborTable {
  int k = 0;
  std::vector<int64_t> rows;     // [queries * k] feature-bank rows, -1 = padding
  std::vector<double> relative;  // [queries * k * 3] neighbour - origin
  std::vector<double> absolute;  // [queries * k * 3] neighbour position
};

// queries[q] = origins[q] + displacement; pass origins = queries (or zeros)
// when there is no natural origin.
NeighborTable find_neighbors(const std::vector<Vec3>& queries, const std::vector<Vec3>& origins,
                             const std::vector<const FusedPointCloud*>& clouds, int k);

// Differentiable embedding for one scale: f [Q, d], displacement [Q, 3]
// (query position minus the table's origin), bank [R, d] ->
// [Q, k * entry_width]. Offsets are (neighbour - origin) - displacement.
// Gradients reach f, the displacement and the bank rows that were read.
Tensor correlation_features(const Tensor& f, const Tensor& pos, const Tensor& bank, const NeighborTable& table,
                            const CorrelationConfig& config);

}  // namespace mvt
