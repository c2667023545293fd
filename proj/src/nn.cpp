#include "mvt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mvt {

Tensor xavier_uniform(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng, double gain) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<Real>(dist(rng));
  return Tensor::from(std::move(shape), std::move(data));
}

std::vector<Real> sinusoidal_encode(const Real (&v)[3], int num_freqs) {
  std::vector<Real> out;
  out.reserve(static_cast<size_t>(6 * num_freqs));
  for (int c = 0; c < 3; ++c) {
    for (int j = 0; j < num_freqs; ++j) {
      const Real a = static_cast<Real>(std::ldexp(std::numbers::pi, j)) * v[c];
      out.push_back(std::sin(a));
      out.push_back(std::cos(a));
    }
  }
  return out;
}

Linear::Linear(ParameterList& params, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
               bool with_bias, bool zero_init) {
  weight = params.add(prefix + ".weight", zero_init ? Tensor::zeros({in, out}) : xavier_uniform({in, out}, in, out, rng));
  if (with_bias) bias = params.add(prefix + ".bias", Tensor::zeros({out}));
}

LayerNorm::LayerNorm(ParameterList& params, const std::string& prefix, int64_t width) {
  gamma = params.add(prefix + ".gamma", Tensor::full({width}, 1));
  beta = params.add(prefix + ".beta", Tensor::zeros({width}));
}

Conv2d::Conv2d(ParameterList& params, const std::string& prefix, int64_t in, int64_t out, int kernel, int stride,
               int padding, Rng& rng)
    : stride_(stride), padding_(padding) {
  const int64_t k2 = static_cast<int64_t>(kernel) * kernel;
  // He-style scaling keeps activations O(1) through GELU stacks.
  weight = params.add(prefix + ".weight",
                      xavier_uniform({out, in, kernel, kernel}, in * k2, out * k2, rng, std::sqrt(2.0)));
  bias = params.add(prefix + ".bias", Tensor::zeros({out}));
}

InstanceNorm::InstanceNorm(ParameterList& params, const std::string& prefix, int64_t channels) {
  gamma = params.add(prefix + ".gamma", Tensor::full({channels}, 1));
  beta = params.add(prefix + ".beta", Tensor::zeros({channels}));
}

ChannelNorm::ChannelNorm(ParameterList& params, const std::string& prefix, int64_t channels) {
  gamma = params.add(prefix + ".gamma", Tensor::full({channels}, 1));
  beta = params.add(prefix + ".beta", Tensor::zeros({channels}));
}

Tensor ChannelNorm::operator()(const Tensor& x) const {
  if (x.rank() != 4) throw ShapeError("ChannelNorm", "expected NCHW, got " + shape_str(x.shape()));
  return channel_norm(x, gamma, beta);
}

Attention::Attention(ParameterList& params, const std::string& prefix, int64_t width, int heads, Rng& rng)
    : heads_(heads), width_(width) {
  if (heads < 1 || width < 1) throw ShapeError("Attention", "need positive width and heads");
  head_dim_ = (width + heads - 1) / heads;
  const int64_t inner = head_dim_ * heads;
  q_ = Linear(params, prefix + ".q", width, inner, rng);
  k_ = Linear(params, prefix + ".k", width, inner, rng);
  v_ = Linear(params, prefix + ".v", width, inner, rng);
  out_ = Linear(params, prefix + ".out", inner, width, rng);
}

Tensor Attention::operator()(const Tensor& x, const Tensor& context, const std::vector<uint8_t>& key_valid) const {
  if (x.rank() != 3 || context.rank() != 3 || x.dim(0) != context.dim(0) || x.dim(2) != width_ ||
      context.dim(2) != width_) {
    throw ShapeError("Attention", shape_str(x.shape()) + " attending " + shape_str(context.shape()));
  }
  const int64_t B = x.dim(0), Lq = x.dim(1), Lk = context.dim(1);
  const int64_t dh = head_dim_;
  auto split = [&](const Tensor& t, int64_t L) {
    return reshape(permute(reshape(t, {B, L, heads_, dh}), {0, 2, 1, 3}), {B * heads_, L, dh});
  };
  Tensor q = split(q_(x), Lq);
  Tensor k = split(k_(context), Lk);
  Tensor v = split(v_(context), Lk);
  Tensor scores = scale(bmm(q, k, false, true), Real(1) / std::sqrt(static_cast<Real>(dh)));
  if (!key_valid.empty()) {
    if (static_cast<int64_t>(key_valid.size()) != B * Lk) throw ShapeError("Attention", "key mask size");
    std::vector<Real> bias(static_cast<size_t>(B * heads_ * Lq * Lk));
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t h = 0; h < heads_; ++h) {
        for (int64_t i = 0; i < Lq; ++i) {
          Real* row = bias.data() + ((b * heads_ + h) * Lq + i) * Lk;
          for (int64_t j = 0; j < Lk; ++j) row[j] = key_valid[b * Lk + j] ? Real(0) : Real(-1e4);
        }
      }
    }
    scores = add(scores, Tensor::from(scores.shape(), std::move(bias)));
  }
  Tensor attended = bmm(softmax(scores), v);
  if (!key_valid.empty()) {
    // A batch element with no valid key attends to nothing.
    std::vector<Real> keep(static_cast<size_t>(B), 1);
    bool any_empty = false;
    for (int64_t b = 0; b < B; ++b) {
      bool has = false;
      for (int64_t j = 0; j < Lk && !has; ++j) has = key_valid[b * Lk + j] != 0;
      if (!has) {
        keep[b] = 0;
        any_empty = true;
      }
    }
    if (any_empty) {
      std::vector<Real> m(static_cast<size_t>(B * heads_ * Lq * dh));
      for (int64_t b = 0; b < B; ++b) {
        std::fill(m.begin() + b * heads_ * Lq * dh, m.begin() + (b + 1) * heads_ * Lq * dh, keep[b]);
      }
      attended = mul(attended, Tensor::from(attended.shape(), std::move(m)));
    }
  }
  Tensor merged = reshape(permute(reshape(attended, {B, heads_, Lq, dh}), {0, 2, 1, 3}), {B, Lq, heads_ * dh});
  return out_(merged);
}

Mlp::Mlp(ParameterList& params, const std::string& prefix, int64_t width, int64_t hidden, Rng& rng) {
  fc1_ = Linear(params, prefix + ".fc1", width, hidden, rng);
  fc2_ = Linear(params, prefix + ".fc2", hidden, width, rng);
}

}  // namespace mvt
