#include "mvt/optim.hpp"

#include <cmath>

#include "mvt/errors.hpp"

namespace mvt {

Tensor& ParameterList::add(const std::string& name, Tensor tensor) {
  if (find(name)) throw ValidationError("duplicate parameter name: " + name);
  tensor.set_requires_grad(true);
  items_.push_back({name, std::move(tensor)});
  return items_.back().tensor;
}

Tensor* ParameterList::find(const std::string& name) {
  for (auto& p : items_) {
    if (p.name == name) return &p.tensor;
  }
  return nullptr;
}

int64_t ParameterList::numel() const {
  int64_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

void ParameterList::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

void optimizer_step(std::span<Parameter> params, OptimState& state) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw ValidationError("optimizer_step: parameter '" + p.name + "' has no gradient");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(static_cast<size_t>(p.tensor.numel()), Real(0));
      state.second_moment.emplace_back(static_cast<size_t>(p.tensor.numel()), Real(0));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ValidationError("optimizer_step: moment buffers do not match parameter list");
  }
  state.step += 1;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(static_cast<double>(c.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(c.beta2), static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto data = p.tensor.data();
    auto grad = p.tensor.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != data.size()) {
      throw ValidationError("optimizer_step: moment shape mismatch for '" + p.name + "'");
    }
    for (size_t k = 0; k < data.size(); ++k) {
      const Real g = grad[k];
      m[k] = c.beta1 * m[k] + (Real(1) - c.beta1) * g;
      v[k] = c.beta2 * v[k] + (Real(1) - c.beta2) * g * g;
      const Real m_hat = static_cast<Real>(m[k] / bc1);
      const Real v_hat = static_cast<Real>(v[k] / bc2);
      data[k] -= c.lr * c.weight_decay * data[k];
      data[k] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
    p.tensor.zero_grad();
  }
}

double clip_grad_norm(std::span<Parameter> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (Real g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm && max_norm > 0) {
    const Real f = static_cast<Real>(max_norm / norm);
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (Real& g : p.tensor.mutable_grad()) g *= f;
    }
  }
  return norm;
}

}  // namespace mvt
