#pragma once

// Binary checkpoint format (all integers little-endian):
//   "MVCK" | u16 version=1 | u32 count |
//   count x ( u16 name_len | name bytes | u8 rank | rank x u32 dim | f32 data )

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mvt/optim.hpp"

namespace mvt {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;

  bool operator==(const NamedArray&) const = default;
};

std::vector<char> encode_checkpoint(const std::vector<NamedArray>& arrays);
std::vector<NamedArray> decode_checkpoint(std::span<const char> bytes, const std::string& origin = "<memory>");

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path);

std::vector<NamedArray> snapshot(std::span<const Parameter> params, const std::string& prefix = "");
// Copies values by name into `params`. Every parameter must be present with a
// matching shape; entries in `arrays` outside `prefix` are ignored.
void restore(std::span<Parameter> params, const std::vector<NamedArray>& arrays, const std::string& prefix = "");

// Optimizer moments and step counter stored as extra arrays ("optim.*").
std::vector<NamedArray> snapshot_optimizer(std::span<const Parameter> params, const OptimState& state);
void restore_optimizer(std::span<const Parameter> params, const std::vector<NamedArray>& arrays, OptimState& state);

}  // namespace mvt
