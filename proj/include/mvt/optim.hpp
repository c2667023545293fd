#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mvt/tensor.hpp"

namespace mvt {

struct Parameter {
  std::string name;
  Tensor tensor;
};

// Ordered, name-unique collection of trainable tensors.
class ParameterList {
 public:
  Tensor& add(const std::string& name, Tensor tensor);
  Tensor* find(const std::string& name);
  std::span<Parameter> items() { return items_; }
  std::span<const Parameter> items() const { return items_; }
  size_t size() const { return items_.size(); }
  int64_t numel() const;
  void zero_grad();

 private:
  std::vector<Parameter> items_;
};

struct AdamWConfig {
  Real lr = Real(1e-3);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
  Real weight_decay = Real(0.01);
};

struct OptimState {
  int64_t step = 0;
  AdamWConfig config;
  std::vector<std::vector<Real>> first_moment;
  std::vector<std::vector<Real>> second_moment;
};

// One AdamW update (decoupled weight decay, bias-corrected moments), then
// clears gradients. Throws ValidationError naming any parameter without a
// gradient.
void optimizer_step(std::span<Parameter> params, OptimState& state);

// Scales all gradients so their global L2 norm is at most max_norm. Returns
// the norm before clipping.
double clip_grad_norm(std::span<Parameter> params, double max_norm);

}  // namespace mvt
