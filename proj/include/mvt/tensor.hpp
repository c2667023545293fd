#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape.
//
// Every op returns a fresh Tensor. When gradient recording is enabled and at
// least one input requires a gradient, the result keeps references to its
// inputs plus a closure that pushes the output gradient back to them. Calling
// backward() on a scalar walks that graph once in reverse topological order
// and then releases it (interior closures and parent links are dropped, leaf
// gradients are kept until zero_grad()).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvt {

#ifdef MVT_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<int64_t>;

// 64-byte aligned storage. Vectorized kernels peel differently depending on
// the start address, so alignment keeps results independent of where the
// allocator happened to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<Real, AlignedAllocator<Real>>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::invalid_argument(op + ": " + detail) {}
};

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Gradient buffer of a node, allocated as zeros on first use.
  Buffer& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const;
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

  std::span<Real> data() { return node_->data; }
  std::span<const Real> data() const { return node_->data; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() { return node_->grad_buffer(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  Real item() const;
  Real at(std::initializer_list<int64_t> index) const;

  // Reverse pass from a scalar. Frees the recorded graph afterwards.
  void backward();
  void zero_grad() { node_->grad.clear(); }

  // Same values, no history, never requires grad.
  Tensor detach() const;

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Gradient recording is on by default and is a per-thread switch.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds a result node; records `backward` only when needed. The closure
// receives the result node whose parents are `inputs` in order.
Tensor make_result(Shape shape, Buffer data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward);

// ---- shape ops ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);
// Rows of a [R, C] tensor; index -1 yields a zero row.
Tensor gather_rows(const Tensor& x, std::span<const int64_t> rows);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
// x[..., n] + bias[n]
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor abs(const Tensor& x);
// [..., 3] -> [..., 6 * num_freqs]; see sinusoidal_encode() in nn.hpp.
Tensor sinusoidal(const Tensor& x, int num_freqs);

// ---- linear algebra ----
// a[M, K] @ b[K, N]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] @ weight[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// Batched a[B, M, K] @ b[B, K, N], with optional transposition of either
// operand's trailing two dims.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

// ---- normalization / activation over the last dim ----
Tensor softmax(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);

// ---- image ops, NCHW ----
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);
Tensor avg_pool2x2(const Tensor& x);
// NCHW normalized over C at every pixel.
Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);
// Per-sample, per-channel normalization over H, W followed by an affine map.
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// sum_i weight_i * |a_i - target_i|; target and weight carry no gradient.
Tensor weighted_l1(const Tensor& a, std::span<const Real> target, std::span<const Real> weight);
// sum_i weight_i * BCE(sigmoid(logit_i), target_i), computed stably.
Tensor weighted_bce_with_logits(const Tensor& logits, std::span<const Real> target,
                                std::span<const Real> weight);

}  // namespace mvt
