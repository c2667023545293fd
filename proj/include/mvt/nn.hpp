#pragma once

// Layers built on the tensor tape. Each layer registers its tensors in a
// ParameterList under "<prefix>.<field>".

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mvt/optim.hpp"
#include "mvt/tensor.hpp"

namespace mvt {

using Rng = std::mt19937_64;

// Uniform(-bound, bound) values with bound = gain * sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng, double gain = 1.0);

// Sinusoidal code of a 3-vector: for each coordinate c and frequency 2^j,
// (sin(2^j pi c), cos(2^j pi c)); coordinate-major. Length 6 * num_freqs.
std::vector<Real> sinusoidal_encode(const Real (&v)[3], int num_freqs);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterList& params, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
         bool with_bias = true, bool zero_init = false);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterList& params, const std::string& prefix, int64_t width);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  Tensor gamma, beta;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterList& params, const std::string& prefix, int64_t in, int64_t out, int kernel, int stride,
         int padding, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride_, padding_); }

  Tensor weight, bias;

 private:
  int stride_ = 1;
  int padding_ = 0;
};

class InstanceNorm {
 public:
  InstanceNorm() = default;
  InstanceNorm(ParameterList& params, const std::string& prefix, int64_t channels);
  Tensor operator()(const Tensor& x) const { return instance_norm(x, gamma, beta); }

  Tensor gamma, beta;
};

// Multi-head attention from x[B, Lq, C] to context[B, Lk, C]. `key_valid`,
// when non-empty, holds B*Lk flags; invalid keys receive a large negative
// score offset. A batch element whose keys are all invalid receives only the
// output projection bias.
class Attention {
 public:
  Attention() = default;
  Attention(ParameterList& params, const std::string& prefix, int64_t width, int heads, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& context, const std::vector<uint8_t>& key_valid = {}) const;

 private:
  Linear q_, k_, v_, out_;
  int heads_ = 1;
  int64_t width_ = 0;
  int64_t head_dim_ = 0;  // ceil(width / heads); heads need not divide width
};

// Per-position normalization across channels of an NCHW tensor. Unlike
// instance normalization it never mixes spatial positions.
class ChannelNorm {
 public:
  ChannelNorm() = default;
  ChannelNorm(ParameterList& params, const std::string& prefix, int64_t channels);
  Tensor operator()(const Tensor& x) const;

  Tensor gamma, beta;
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterList& params, const std::string& prefix, int64_t width, int64_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2_(gelu(fc1_(x))); }

 private:
  Linear fc1_, fc2_;
};

}  // namespace mvt
