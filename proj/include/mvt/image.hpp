#pragma once

#include <cstdint>
#include <vector>

namespace mvt {

// 8-bit interleaved RGB, row-major.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 3, 0) {}
  uint8_t* pixel(int row, int col) { return data.data() + (static_cast<size_t>(row) * width + col) * 3; }
  const uint8_t* pixel(int row, int col) const { return data.data() + (static_cast<size_t>(row) * width + col) * 3; }
  bool operator==(const RgbImage&) const = default;
};

}  // namespace mvt
