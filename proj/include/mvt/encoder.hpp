#pragma once

// Stride-4 convolutional backbone and average-pooled feature pyramid.

#include <vector>

#include "mvt/image.hpp"
#include "mvt/nn.hpp"

namespace mvt {

struct EncoderConfig {
  int feature_dim = 128;
  int stem_width = 64;
  int stage_width = 128;
  int residual_blocks = 2;
  int levels = 4;
};

// Stride of the base feature map relative to the input image.
constexpr int kEncoderStride = 4;

class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterList& params, const std::string& prefix, const EncoderConfig& config, Rng& rng);

  // images [B, 3, H, W] -> base features [B, d, H/4, W/4]. No divisibility
  // check beyond what the convolutions require.
  Tensor forward(const Tensor& images) const;

  // Encodes frames after checking that H and W are multiples of 32.
  Tensor encode_frames(const std::vector<const RgbImage*>& images) const;

  const EncoderConfig& config() const { return config_; }

 private:
  struct ResidualBlock {
    Conv2d conv1, conv2;
    ChannelNorm norm1, norm2;
  };

  EncoderConfig config_;
  Conv2d stem_, stage_, head_;
  ChannelNorm stem_norm_, stage_norm_;
  std::vector<ResidualBlock> blocks_;
};

// RGB bytes -> [B, 3, H, W] with values mapped to [-1, 1].
Tensor images_to_tensor(const std::vector<const RgbImage*>& images);

// Level 0 is `base` [B, d, h, w]; each further level is a 2x2 average pool.
std::vector<Tensor> build_pyramid(const Tensor& base, int levels = 4);

}  // namespace mvt
