#include "mvt/encoder.hpp"

#include <string>

#include "mvt/errors.hpp"

namespace mvt {

Encoder::Encoder(ParameterList& params, const std::string& prefix, const EncoderConfig& config, Rng& rng)
    : config_(config) {
  if (config.feature_dim < 1 || config.stem_width < 1 || config.stage_width < 1 || config.residual_blocks < 0 ||
      config.levels < 1) {
    throw ValidationError("encoder: widths and level count must be positive");
  }
  stem_ = Conv2d(params, prefix + ".stem", 3, config.stem_width, 3, 2, 1, rng);
  stem_norm_ = ChannelNorm(params, prefix + ".stem_norm", config.stem_width);
  stage_ = Conv2d(params, prefix + ".stage", config.stem_width, config.stage_width, 3, 2, 1, rng);
  stage_norm_ = ChannelNorm(params, prefix + ".stage_norm", config.stage_width);
  for (int i = 0; i < config.residual_blocks; ++i) {
    const std::string p = prefix + ".block" + std::to_string(i);
    ResidualBlock b;
    b.conv1 = Conv2d(params, p + ".conv1", config.stage_width, config.stage_width, 3, 1, 1, rng);
    b.norm1 = ChannelNorm(params, p + ".norm1", config.stage_width);
    b.conv2 = Conv2d(params, p + ".conv2", config.stage_width, config.stage_width, 3, 1, 1, rng);
    b.norm2 = ChannelNorm(params, p + ".norm2", config.stage_width);
    blocks_.push_back(std::move(b));
  }
  head_ = Conv2d(params, prefix + ".head", config.stage_width, config.feature_dim, 1, 1, 0, rng);
}

Tensor Encoder::forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("encoder", "expected [B, 3, H, W], got " + shape_str(images.shape()));
  }
  if (images.dim(2) % kEncoderStride != 0 || images.dim(3) % kEncoderStride != 0) {
    throw ShapeError("encoder", "spatial size must be a multiple of 4, got " + shape_str(images.shape()));
  }
  Tensor x = gelu(stem_norm_(stem_(images)));
  x = gelu(stage_norm_(stage_(x)));
  for (const auto& b : blocks_) {
    Tensor y = gelu(b.norm1(b.conv1(x)));
    y = b.norm2(b.conv2(y));
    x = gelu(add(x, y));
  }
  return head_(x);
}

Tensor Encoder::encode_frames(const std::vector<const RgbImage*>& images) const {
  const int multiple = kEncoderStride << (config_.levels - 1);
  for (const RgbImage* img : images) {
    if (img->height % multiple != 0 || img->width % multiple != 0) {
      throw ValidationError("encoder: image size " + std::to_string(img->width) + "x" + std::to_string(img->height) +
                            " is not a multiple of " + std::to_string(multiple) + "; pad the input first");
    }
  }
  return forward(images_to_tensor(images));
}

Tensor images_to_tensor(const std::vector<const RgbImage*>& images) {
  if (images.empty()) throw ValidationError("encoder: no images");
  const int64_t H = images[0]->height, W = images[0]->width;
  std::vector<Real> data(static_cast<size_t>(images.size()) * 3 * H * W);
  for (size_t b = 0; b < images.size(); ++b) {
    const RgbImage& img = *images[b];
    if (img.height != H || img.width != W) throw ValidationError("encoder: images in a batch must share a size");
    Real* out = data.data() + b * 3 * H * W;
    for (int64_t i = 0; i < H * W; ++i) {
      for (int c = 0; c < 3; ++c) out[c * H * W + i] = static_cast<Real>(img.data[i * 3 + c]) / Real(127.5) - 1;
    }
  }
  return Tensor::from({static_cast<int64_t>(images.size()), 3, H, W}, std::move(data));
}

std::vector<Tensor> build_pyramid(const Tensor& base, int levels) {
  if (base.rank() != 4) throw ShapeError("build_pyramid", "expected [B, d, h, w], got " + shape_str(base.shape()));
  const int64_t div = int64_t{1} << (levels - 1);
  if (levels < 1 || base.dim(2) % div != 0 || base.dim(3) % div != 0) {
    throw ValidationError("build_pyramid: base size " + shape_str(base.shape()) + " not divisible by " +
                          std::to_string(div));
  }
  std::vector<Tensor> out{base};
  for (int s = 1; s < levels; ++s) out.push_back(avg_pool2x2(out.back()));
  return out;
}

}  // namespace mvt
