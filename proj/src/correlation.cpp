#include "mvt/correlation.hpp"

#include <string>

namespace mvt {

int entry_width(CorrelationEncoding encoding) {
  switch (encoding) {
    case CorrelationEncoding::kOffsetOnly:
      return 4;
    case CorrelationEncoding::kNoOffset:
      return 1;
    case CorrelationEncoding::kOffsetAndLocation:
      return 7;
  }
  return 0;
}

int correlation_length(const CorrelationConfig& config, int levels) {
  return levels * config.neighbors * entry_width(config.encoding);
}

const char* encoding_name(CorrelationEncoding encoding) {
  switch (encoding) {
    case CorrelationEncoding::kOffsetOnly:
      return "offset";
    case CorrelationEncoding::kNoOffset:
      return "none";
    case CorrelationEncoding::kOffsetAndLocation:
      return "offset+location";
  }
  return "?";
}

CorrelationEncoding parse_encoding(const std::string& name) {
  if (name == "offset") return CorrelationEncoding::kOffsetOnly;
  if (name == "none") return CorrelationEncoding::kNoOffset;
  if (name == "offset+location") return CorrelationEncoding::kOffsetAndLocation;
  throw ValidationError("unknown correlation encoding \"" + name + "\" (expected offset, none, offset+location)");
}

CorrelationSet correlate(std::span<const Real> feature, const Vec3& p,
                         const std::vector<const FusedPointCloud*>& clouds, const FeatureBank& bank, int k) {
  if (k < 1) throw ValidationError("correlate: K must be >= 1");
  if (clouds.size() != bank.levels.size()) throw ValidationError("correlate: need one cloud per scale");
  if (static_cast<int>(feature.size()) != bank.dim) throw ShapeError("correlate", "feature width mismatch");
  CorrelationSet set;
  for (size_t s = 0; s < clouds.size(); ++s) {
    std::vector<CorrelationEntry> entries(static_cast<size_t>(k));
    const auto nn = clouds[s]->knn_query(p, k);
    const auto bank_data = bank.levels[s].data();
    for (size_t i = 0; i < nn.size(); ++i) {
      CorrelationEntry& e = entries[i];
      e.valid = true;
      e.point = nn[i].index;
      e.location = clouds[s]->positions[e.point];
      e.offset = e.location - p;
      const Real* phi = bank_data.data() + clouds[s]->feature_rows[e.point] * bank.dim;
      double sim = 0;
      for (int c = 0; c < bank.dim; ++c) sim += static_cast<double>(feature[c]) * phi[c];
      e.similarity = sim;
    }
    set.scales.push_back(std::move(entries));
  }
  return set;
}

std::vector<Real> embed_correlation(const CorrelationSet& set, const CorrelationConfig& config) {
  const int w = entry_width(config.encoding);
  std::vector<Real> out;
  for (const auto& scale : set.scales) {
    for (const auto& e : scale) {
      const size_t base = out.size();
      out.resize(base + w, Real(0));
      if (!e.valid) continue;
      out[base] = static_cast<Real>(config.similarity_scale * e.similarity);
      if (w >= 4)
        for (int a = 0; a < 3; ++a) out[base + 1 + a] = static_cast<Real>(config.offset_scale * e.offset[a]);
      if (w == 7)
        for (int a = 0; a < 3; ++a) out[base + 4 + a] = static_cast<Real>(config.offset_scale * e.location[a]);
    }
  }
  return out;
}

NeighborTable find_neighbors(const std::vector<Vec3>& queries, const std::vector<Vec3>& origins,
                             const std::vector<const FusedPointCloud*>& clouds, int k) {
  if (k < 1) throw ValidationError("find_neighbors: K must be >= 1");
  if (queries.size() != clouds.size() || origins.size() != queries.size()) {
    throw ValidationError("find_neighbors: one cloud and origin per query required");
  }
  NeighborTable t;
  t.k = k;
  t.rows.assign(queries.size() * k, -1);
  t.relative.assign(queries.size() * k * 3, 0.0);
  t.absolute.assign(queries.size() * k * 3, 0.0);
  for (size_t q = 0; q < queries.size(); ++q) {
    const auto nn = clouds[q]->knn_query(queries[q], k);
    for (size_t i = 0; i < nn.size(); ++i) {
      t.rows[q * k + i] = clouds[q]->feature_rows[nn[i].index];
      const Vec3& x = clouds[q]->positions[nn[i].index];
      for (int a = 0; a < 3; ++a) {
        t.relative[(q * k + i) * 3 + a] = x[a] - origins[q][a];
        t.absolute[(q * k + i) * 3 + a] = x[a];
      }
    }
  }
  return t;
}

Tensor correlation_features(const Tensor& f, const Tensor& pos, const Tensor& bank, const NeighborTable& table,
                            const CorrelationConfig& config) {
  const int64_t Q = f.dim(0), d = f.dim(1), K = table.k;
  if (f.rank() != 2 || pos.rank() != 2 || pos.dim(0) != Q || pos.dim(1) != 3 || bank.rank() != 2 ||
      bank.dim(1) != d || static_cast<int64_t>(table.rows.size()) != Q * K) {
    throw ShapeError("correlation", "f " + shape_str(f.shape()) + ", pos " + shape_str(pos.shape()) + ", bank " +
                                        shape_str(bank.shape()) + ", table " + std::to_string(table.rows.size()));
  }
  const int w = entry_width(config.encoding);
  const Real scale_factor = static_cast<Real>(config.offset_scale);
  const Real sim_scale = static_cast<Real>(config.similarity_scale);
  Buffer out(static_cast<size_t>(Q * K * w), Real(0));
  const Real* fd = f.data().data();
  const Real* bd = bank.data().data();
  const Real* pd = pos.data().data();
  for (int64_t q = 0; q < Q; ++q) {
    for (int64_t i = 0; i < K; ++i) {
      const int64_t row = table.rows[q * K + i];
      if (row < 0) continue;
      Real* o = out.data() + (q * K + i) * w;
      const Real* phi = bd + row * d;
      const Real* fq = fd + q * d;
      Real sim = 0;
      for (int64_t c = 0; c < d; ++c) sim += fq[c] * phi[c];
      o[0] = sim_scale * sim;
      if (w >= 4) {
        for (int a = 0; a < 3; ++a) {
          o[1 + a] = scale_factor * (static_cast<Real>(table.relative[(q * K + i) * 3 + a]) - pd[q * 3 + a]);
        }
      }
      if (w == 7) {
        for (int a = 0; a < 3; ++a) o[4 + a] = scale_factor * static_cast<Real>(table.absolute[(q * K + i) * 3 + a]);
      }
    }
  }
  return make_result({Q, K * w}, std::move(out), {f, pos, bank}, [=, rows = table.rows](Node& self) {
    const Real* g = self.grad.data();
    Node& fn = *self.parents[0];
    Node& pn = *self.parents[1];
    Node& bn = *self.parents[2];
    const bool need_f = fn.requires_grad, need_p = pn.requires_grad, need_b = bn.requires_grad;
    Real* gf = need_f ? fn.grad_buffer().data() : nullptr;
    Real* gp = need_p ? pn.grad_buffer().data() : nullptr;
    Real* gb = need_b ? bn.grad_buffer().data() : nullptr;
    const Real* fv = fn.data.data();
    const Real* bv = bn.data.data();
    for (int64_t q = 0; q < Q; ++q) {
      for (int64_t i = 0; i < K; ++i) {
        const int64_t row = rows[q * K + i];
        if (row < 0) continue;
        const Real* go = g + (q * K + i) * w;
        const Real gs = sim_scale * go[0];
        if (need_f)
          for (int64_t c = 0; c < d; ++c) gf[q * d + c] += gs * bv[row * d + c];
        if (need_b)
          for (int64_t c = 0; c < d; ++c) gb[row * d + c] += gs * fv[q * d + c];
        if (need_p && w >= 4)
          for (int a = 0; a < 3; ++a) gp[q * 3 + a] -= scale_factor * go[1 + a];
      }
    }
  });
}

}  // namespace mvt
