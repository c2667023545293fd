#include <random>

#include "doctest.h"
#include "mvt/encoder.hpp"
#include "mvt/errors.hpp"

using namespace mvt;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.feature_dim = 16;
  c.stem_width = 8;
  c.stage_width = 12;
  c.residual_blocks = 1;
  return c;
}

RgbImage random_image(int h, int w, std::mt19937_64& rng) {
  RgbImage img(h, w);
  for (auto& b : img.data) b = static_cast<uint8_t>(rng() & 0xFF);
  return img;
}

// Input interval [lo, hi] seen by output index o of a conv with kernel k,
// stride s and padding p, applied in reverse over the layer stack.
std::pair<int, int> receptive_field(int o) {
  struct Layer { int k, s, p; };
  // stem, stage, block convs (two per residual block), head.
  const Layer layers[] = {{3, 2, 1}, {3, 2, 1}, {3, 1, 1}, {3, 1, 1}, {1, 1, 0}};
  int lo = o, hi = o;
  for (int i = 4; i >= 0; --i) {
    lo = lo * layers[i].s - layers[i].p;
    hi = hi * layers[i].s - layers[i].p + layers[i].k - 1;
  }
  return {lo, hi};
}

}  // namespace

TEST_CASE("64x64 input yields a 16x16 base map and a four level pyramid") {
  Rng rng(1);
  ParameterList params;
  EncoderConfig cfg;  // full-size defaults
  Encoder enc(params, "enc", cfg, rng);
  std::mt19937_64 r(2);
  RgbImage img = random_image(64, 64, r);
  Tensor base = enc.encode_frames({&img});
  CHECK(base.shape() == Shape{1, 128, 16, 16});
  auto pyr = build_pyramid(base);
  REQUIRE(pyr.size() == 4);
  for (int s = 0; s < 4; ++s) {
    CHECK(pyr[s].dim(1) == 128);
    CHECK(pyr[s].dim(2) == 16 >> s);
    CHECK(pyr[s].dim(3) == 16 >> s);
  }
  for (Real v : base.data()) CHECK(std::isfinite(v));
}

TEST_CASE("encoder rejects sizes that are not multiples of 32") {
  Rng rng(1);
  ParameterList params;
  Encoder enc(params, "enc", small_config(), rng);
  RgbImage img(48, 64);
  CHECK_THROWS_AS(enc.encode_frames({&img}), ValidationError);
}

TEST_CASE("constant image gives constant interior features") {
  Rng rng(3);
  ParameterList params;
  Encoder enc(params, "enc", small_config(), rng);
  RgbImage img(64, 64);
  for (size_t i = 0; i < img.data.size(); i += 3) {
    img.data[i] = 200;
    img.data[i + 1] = 90;
    img.data[i + 2] = 30;
  }
  Tensor f = enc.encode_frames({&img});
  const int64_t d = f.dim(1), h = f.dim(2);
  // Padding influence reaches at most two base cells in from each border.
  for (int64_t c = 0; c < d; ++c) {
    const Real ref = f.at({0, c, 4, 4});
    for (int64_t i = 3; i < h - 3; ++i)
      for (int64_t j = 3; j < h - 3; ++j) CHECK(std::abs(f.at({0, c, i, j}) - ref) < 1e-4);
  }
}

TEST_CASE("a single changed pixel only affects its receptive field") {
  Rng rng(4);
  ParameterList params;
  Encoder enc(params, "enc", small_config(), rng);
  std::mt19937_64 r(5);
  RgbImage a = random_image(64, 64, r);
  RgbImage b = a;
  const int pr = 29, pc = 41;
  b.pixel(pr, pc)[1] ^= 0x80;
  Tensor fa = enc.encode_frames({&a}), fb = enc.encode_frames({&b});
  int changed_inside = 0;
  for (int64_t c = 0; c < fa.dim(1); ++c) {
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        auto [rlo, rhi] = receptive_field(i);
        auto [clo, chi] = receptive_field(j);
        const bool inside = pr >= rlo && pr <= rhi && pc >= clo && pc <= chi;
        const bool same = fa.at({0, c, i, j}) == fb.at({0, c, i, j});
        if (!inside) CHECK(same);
        changed_inside += inside && !same;
      }
    }
  }
  CHECK(changed_inside > 0);
}

TEST_CASE("pyramid pooling") {
  Tensor block = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto p = build_pyramid(block, 2);
  CHECK(p[1].item() == doctest::Approx(2.5));

  Tensor constant = Tensor::full({1, 3, 16, 16}, 0.75);
  for (const auto& level : build_pyramid(constant))
    for (Real v : level.data()) CHECK(v == doctest::Approx(0.75));

  std::mt19937_64 r(6);
  std::normal_distribution<double> n(0, 1);
  std::vector<Real> v(2 * 4 * 16 * 16);
  for (auto& x : v) x = static_cast<Real>(n(r));
  auto levels = build_pyramid(Tensor::from({2, 4, 16, 16}, v));
  for (size_t s = 0; s + 1 < levels.size(); ++s) {
    double m0 = 0, m1 = 0;
    for (Real x : levels[s].data()) m0 += x;
    for (Real x : levels[s + 1].data()) m1 += x;
    CHECK(std::abs(m0 / levels[s].numel() - m1 / levels[s + 1].numel()) < 1e-5);
  }
  CHECK_THROWS_AS(build_pyramid(Tensor::zeros({1, 1, 12, 12})), ValidationError);
}
