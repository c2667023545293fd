#include "mvt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace mvt {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

bool wants_grad(const std::vector<Tensor>& inputs) {
  if (!g_grad_enabled) return false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

// Gradient buffer of parent i, or nullptr when that parent takes no gradient.
Real* parent_grad(Node& self, size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.grad_buffer().data();
}

const Real* parent_data(const Node& self, size_t i) { return self.parents[i]->data.data(); }

void require_rank(const char* op, const Tensor& t, int rank) {
  if (t.rank() != rank) {
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

int normalize_axis(const char* op, int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError(op, "axis out of range");
  return axis;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("shape", "negative dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

Buffer& Node::grad_buffer() {
  if (grad.empty() && !data.empty()) grad.assign(data.size(), Real(0));
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->data.assign(static_cast<size_t>(shape_numel(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<Real> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("Tensor::from", "shape " + shape_str(shape) + " holds " +
                                         std::to_string(shape_numel(shape)) + " values, got " +
                                         std::to_string(data.size()));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data.assign(data.begin(), data.end());
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return full({}, value, requires_grad); }

int64_t Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw ShapeError("dim", "index out of range for " + shape_str(shape()));
  return node_->shape[static_cast<size_t>(i)];
}

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item", "tensor is not a scalar: " + shape_str(shape()));
  return node_->data[0];
}

Real Tensor::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) throw ShapeError("at", "index rank mismatch");
  int64_t flat = 0;
  int k = 0;
  for (auto i : index) {
    flat = flat * node_->shape[static_cast<size_t>(k)] + i;
    ++k;
  }
  return node_->data[static_cast<size_t>(flat)];
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

void Tensor::backward() {
  if (numel() != 1) {
    throw ShapeError("backward", "loss must be a scalar, got " + shape_str(shape()));
  }
  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Release interior structure; leaves keep their accumulated gradients.
  for (Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      if (n != node_.get()) n->grad.clear();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(Shape shape, Buffer data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (wants_grad(inputs)) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) {
      if (t.defined()) {
        node->parents.push_back(t.node_ptr());
      } else {
        // Keep parent indices aligned with `inputs`.
        node->parents.push_back(std::make_shared<Node>());
      }
    }
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& x, Shape shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape", "more than one -1 in " + shape_str(shape));
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[static_cast<size_t>(infer)] = x.numel() / known;
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

namespace {

// Visits output elements in order; fn(out_index, src_index). The last output
// axis runs as a strided inner loop.
template <typename Fn>
void for_each_permuted(const Shape& out_shape, const std::vector<int64_t>& src_stride, Fn&& fn) {
  const int r = static_cast<int>(out_shape.size());
  const int64_t inner = out_shape[r - 1];
  const int64_t inner_stride = src_stride[r - 1];
  int64_t outer = 1;
  for (int k = 0; k < r - 1; ++k) outer *= out_shape[k];
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t base = 0, o = 0;
  for (int64_t blk = 0; blk < outer; ++blk) {
    for (int64_t i = 0; i < inner; ++i) fn(o++, base + i * inner_stride);
    for (int k = r - 2; k >= 0; --k) {
      base += src_stride[k];
      if (++idx[k] < out_shape[k]) break;
      base -= src_stride[k] * out_shape[k];
      idx[k] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute", "perm rank mismatch");
  std::vector<int64_t> in_stride(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * x.shape()[i + 1];
  Shape out_shape(static_cast<size_t>(r));
  std::vector<int64_t> src_stride(static_cast<size_t>(r));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int i = 0; i < r; ++i) {
    if (perm[i] < 0 || perm[i] >= r || seen[perm[i]]) throw ShapeError("permute", "invalid perm");
    seen[perm[i]] = true;
    out_shape[i] = x.shape()[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  Buffer out(static_cast<size_t>(x.numel()));
  if (!out.empty()) {
    const Real* xd = x.data().data();
    Real* od = out.data();
    for_each_permuted(out_shape, src_stride, [&](int64_t o, int64_t src) { od[o] = xd[src]; });
  }
  Shape shape_copy = out_shape;
  return make_result(std::move(out_shape), std::move(out), {x}, [shape_copy, src_stride](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      if (self.grad.empty()) return;
      const Real* gy = self.grad.data();
      for_each_permuted(shape_copy, src_stride, [&](int64_t o, int64_t src) { g[src] += gy[o]; });
    }
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat", "no inputs");
  const int r = xs[0].rank();
  axis = normalize_axis("concat", axis, r);
  Shape out_shape = xs[0].shape();
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw ShapeError("concat", "rank mismatch");
    for (int k = 0; k < r; ++k) {
      if (k != axis && t.shape()[k] != xs[0].shape()[k]) {
        throw ShapeError("concat", shape_str(t.shape()) + " vs " + shape_str(xs[0].shape()));
      }
    }
    out_shape[axis] += t.shape()[axis];
  }
  int64_t outer = 1, inner = 1;
  for (int k = 0; k < axis; ++k) outer *= out_shape[k];
  for (int k = axis + 1; k < r; ++k) inner *= out_shape[k];
  const int64_t out_row = out_shape[axis] * inner;
  Buffer out(static_cast<size_t>(shape_numel(out_shape)));
  auto chunks = std::make_shared<std::vector<int64_t>>();  // per input: row length
  int64_t offset = 0;
  for (const auto& t : xs) {
    const int64_t len = t.shape()[axis] * inner;
    const Real* src = t.data().data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * len, len, out.data() + o * out_row + offset);
    }
    chunks->push_back(len);
    offset += len;
  }
  return make_result(std::move(out_shape), std::move(out), xs, [chunks, outer, out_row](Node& self) {
    int64_t off = 0;
    for (size_t i = 0; i < chunks->size(); ++i) {
      const int64_t len = (*chunks)[i];
      if (Real* g = parent_grad(self, i)) {
        for (int64_t o = 0; o < outer; ++o) {
          const Real* src = self.grad.data() + o * out_row + off;
          Real* dst = g + o * len;
          for (int64_t k = 0; k < len; ++k) dst[k] += src[k];
        }
      }
      off += len;
    }
  });
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  const int r = x.rank();
  axis = normalize_axis("slice", axis, r);
  if (start < 0 || length < 0 || start + length > x.shape()[axis]) {
    throw ShapeError("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                  ") outside " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  int64_t outer = 1, inner = 1;
  for (int k = 0; k < axis; ++k) outer *= x.shape()[k];
  for (int k = axis + 1; k < r; ++k) inner *= x.shape()[k];
  const int64_t in_row = x.shape()[axis] * inner;
  const int64_t len = length * inner;
  const int64_t off = start * inner;
  Buffer out(static_cast<size_t>(outer * len));
  const Real* xd = x.data().data();
  for (int64_t o = 0; o < outer; ++o) std::copy_n(xd + o * in_row + off, len, out.data() + o * len);
  return make_result(std::move(out_shape), std::move(out), {x}, [outer, in_row, len, off](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      for (int64_t o = 0; o < outer; ++o) {
        const Real* src = self.grad.data() + o * len;
        Real* dst = g + o * in_row + off;
        for (int64_t k = 0; k < len; ++k) dst[k] += src[k];
      }
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const int64_t> rows) {
  require_rank("gather_rows", x, 2);
  const int64_t R = x.dim(0), C = x.dim(1);
  auto idx = std::make_shared<std::vector<int64_t>>(rows.begin(), rows.end());
  Buffer out(static_cast<size_t>(idx->size() * C), Real(0));
  const Real* xd = x.data().data();
  for (size_t i = 0; i < idx->size(); ++i) {
    const int64_t r = (*idx)[i];
    if (r < -1 || r >= R) throw ShapeError("gather_rows", "row " + std::to_string(r) + " outside " + shape_str(x.shape()));
    if (r >= 0) std::copy_n(xd + r * C, C, out.data() + static_cast<int64_t>(i) * C);
  }
  return make_result({static_cast<int64_t>(idx->size()), C}, std::move(out), {x}, [idx, C](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      for (size_t i = 0; i < idx->size(); ++i) {
        const int64_t r = (*idx)[i];
        if (r < 0) continue;
        const Real* src = self.grad.data() + static_cast<int64_t>(i) * C;
        for (int64_t k = 0; k < C; ++k) g[r * C + k] += src[k];
      }
    }
  });
}

// --------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Buffer out(a.data().begin(), a.data().end());
  const Real* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (size_t p = 0; p < 2; ++p) {
      if (Real* g = parent_grad(self, p)) {
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Buffer out(a.data().begin(), a.data().end());
  const Real* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (Real* g = parent_grad(self, 1)) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Buffer out(a.data().begin(), a.data().end());
  const Real* bd = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const Real* ad = parent_data(self, 0);
    const Real* bd = parent_data(self, 1);
    if (Real* g = parent_grad(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bd[i];
    }
    if (Real* g = parent_grad(self, 1)) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * ad[i];
    }
  });
}

Tensor scale(const Tensor& x, Real factor) {
  Buffer out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", bias, 1);
  if (x.rank() < 1 || x.dim(-1) != bias.dim(0)) {
    throw ShapeError("add_bias", shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  }
  const int64_t n = bias.dim(0);
  Buffer out(x.data().begin(), x.data().end());
  const Real* bd = bias.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[static_cast<int64_t>(i) % n];
  return make_result(x.shape(), std::move(out), {x, bias}, [n](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (Real* g = parent_grad(self, 1)) {
      for (size_t i = 0; i < self.grad.size(); ++i) g[static_cast<int64_t>(i) % n] += self.grad[i];
    }
  });
}

namespace {

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  Buffer out(static_cast<size_t>(x.numel()));
  const Real* xd = x.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  return make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      const Real* xd = parent_data(self, 0);
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * deriv(xd[i], self.data[i]);
    }
  });
}

constexpr Real kGeluC = Real(0.7978845608028654);  // sqrt(2 / pi)
constexpr Real kGeluA = Real(0.044715);

// tanh through exp: libm's tanhf slows down several-fold after AVX GEMM
// kernels have run, exp does not.
inline Real fast_tanh(Real a) { return Real(2) / (Real(1) + std::exp(Real(-2) * a)) - Real(1); }

}  // namespace

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](Real v) {
        if (v >= 0) return Real(1) / (Real(1) + std::exp(-v));
        const Real e = std::exp(v);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](Real v) { return v > 0 ? v : Real(0); }, [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x,
      [](Real v) { return Real(0.5) * v * (Real(1) + fast_tanh(kGeluC * (v + kGeluA * v * v * v))); },
      [](Real v, Real) {
        const Real th = fast_tanh(kGeluC * (v + kGeluA * v * v * v));
        return Real(0.5) * (Real(1) + th) +
               Real(0.5) * v * (Real(1) - th * th) * kGeluC * (Real(1) + Real(3) * kGeluA * v * v);
      });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](Real v) { return std::abs(v); },
      [](Real v, Real) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); });
}

Tensor sinusoidal(const Tensor& x, int num_freqs) {
  if (x.rank() < 1 || x.dim(-1) != 3) throw ShapeError("sinusoidal", "expected [..., 3], got " + shape_str(x.shape()));
  if (num_freqs < 1) throw ShapeError("sinusoidal", "num_freqs must be >= 1");
  const int64_t rows = x.numel() / 3;
  const int64_t width = 6 * num_freqs;
  Shape out_shape = x.shape();
  out_shape.back() = width;
  Buffer out(static_cast<size_t>(rows * width));
  const Real* xd = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    Real* o = out.data() + r * width;
    for (int c = 0; c < 3; ++c) {
      for (int j = 0; j < num_freqs; ++j) {
        const Real w = static_cast<Real>(std::ldexp(std::numbers::pi, j));
        const Real a = w * xd[r * 3 + c];
        o[(c * num_freqs + j) * 2] = std::sin(a);
        o[(c * num_freqs + j) * 2 + 1] = std::cos(a);
      }
    }
  }
  return make_result(std::move(out_shape), std::move(out), {x}, [rows, width, num_freqs](Node& self) {
    Real* g = parent_grad(self, 0);
    if (!g) return;
    for (int64_t r = 0; r < rows; ++r) {
      const Real* y = self.data.data() + r * width;
      const Real* gy = self.grad.data() + r * width;
      for (int c = 0; c < 3; ++c) {
        for (int j = 0; j < num_freqs; ++j) {
          const Real w = static_cast<Real>(std::ldexp(std::numbers::pi, j));
          const int k = (c * num_freqs + j) * 2;
          g[r * 3 + c] += w * (gy[k] * y[k + 1] - gy[k + 1] * y[k]);
        }
      }
    }
  });
}

// ------------------------------------------------------------ linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul", shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Buffer out(static_cast<size_t>(M * N));
  MapMat(out.data(), M, N).noalias() = ConstMapMat(a.data().data(), M, K) * ConstMapMat(b.data().data(), K, N);
  return make_result({M, N}, std::move(out), {a, b}, [M, K, N](Node& self) {
    ConstMapMat G(self.grad.data(), M, N);
    if (Real* g = parent_grad(self, 0)) {
      MapMat(g, M, K).noalias() += G * ConstMapMat(parent_data(self, 1), K, N).transpose();
    }
    if (Real* g = parent_grad(self, 1)) {
      MapMat(g, K, N).noalias() += ConstMapMat(parent_data(self, 0), M, K).transpose() * G;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", weight, 2);
  if (x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw ShapeError("linear", shape_str(x.shape()) + " @ " + shape_str(weight.shape()));
  }
  const int64_t K = weight.dim(0), N = weight.dim(1);
  const int64_t M = x.numel() / K;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != N)) {
    throw ShapeError("linear", "bias " + shape_str(bias.shape()) + " for output width " + std::to_string(N));
  }
  Shape out_shape = x.shape();
  out_shape.back() = N;
  Buffer out(static_cast<size_t>(M * N));
  MapMat O(out.data(), M, N);
  O.noalias() = ConstMapMat(x.data().data(), M, K) * ConstMapMat(weight.data().data(), K, N);
  if (has_bias) {
    O.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(bias.data().data(), N);
  }
  return make_result(std::move(out_shape), std::move(out), {x, weight, bias}, [M, K, N, has_bias](Node& self) {
    ConstMapMat G(self.grad.data(), M, N);
    if (Real* g = parent_grad(self, 0)) {
      MapMat(g, M, K).noalias() += G * ConstMapMat(parent_data(self, 1), K, N).transpose();
    }
    if (Real* g = parent_grad(self, 1)) {
      MapMat(g, K, N).noalias() += ConstMapMat(parent_data(self, 0), M, K).transpose() * G;
    }
    if (has_bias) {
      if (Real* g = parent_grad(self, 2)) {
        Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(g, N) += G.colwise().sum();
      }
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const int64_t B = a.dim(0);
  const int64_t a_rows = a.dim(1), a_cols = a.dim(2);
  const int64_t b_rows = b.dim(1), b_cols = b.dim(2);
  const int64_t M = transpose_a ? a_cols : a_rows;
  const int64_t K = transpose_a ? a_rows : a_cols;
  const int64_t Kb = transpose_b ? b_cols : b_rows;
  const int64_t N = transpose_b ? b_rows : b_cols;
  if (b.dim(0) != B || K != Kb) {
    throw ShapeError("bmm", shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  }
  Buffer out(static_cast<size_t>(B * M * N));
  const Real* ad = a.data().data();
  const Real* bd = b.data().data();
  for (int64_t i = 0; i < B; ++i) {
    ConstMapMat A(ad + i * a_rows * a_cols, a_rows, a_cols);
    ConstMapMat Bm(bd + i * b_rows * b_cols, b_rows, b_cols);
    MapMat O(out.data() + i * M * N, M, N);
    if (!transpose_a && !transpose_b) O.noalias() = A * Bm;
    else if (!transpose_a && transpose_b) O.noalias() = A * Bm.transpose();
    else if (transpose_a && !transpose_b) O.noalias() = A.transpose() * Bm;
    else O.noalias() = A.transpose() * Bm.transpose();
  }
  return make_result({B, M, N}, std::move(out), {a, b},
                     [=](Node& self) {
                       Real* ga = parent_grad(self, 0);
                       Real* gb = parent_grad(self, 1);
                       const Real* ad = parent_data(self, 0);
                       const Real* bd = parent_data(self, 1);
                       for (int64_t i = 0; i < B; ++i) {
                         ConstMapMat G(self.grad.data() + i * M * N, M, N);
                         ConstMapMat A(ad + i * a_rows * a_cols, a_rows, a_cols);
                         ConstMapMat Bm(bd + i * b_rows * b_cols, b_rows, b_cols);
                         if (ga) {
                           MapMat GA(ga + i * a_rows * a_cols, a_rows, a_cols);
                           // op(A) = M x K; d op(A) = G op(B)^T
                           if (!transpose_a) {
                             if (!transpose_b) GA.noalias() += G * Bm.transpose();
                             else GA.noalias() += G * Bm;
                           } else {
                             if (!transpose_b) GA.noalias() += Bm * G.transpose();
                             else GA.noalias() += Bm.transpose() * G.transpose();
                           }
                         }
                         if (gb) {
                           MapMat GB(gb + i * b_rows * b_cols, b_rows, b_cols);
                           // d op(B) = op(A)^T G
                           if (!transpose_b) {
                             if (!transpose_a) GB.noalias() += A.transpose() * G;
                             else GB.noalias() += A * G;
                           } else {
                             if (!transpose_a) GB.noalias() += G.transpose() * A;
                             else GB.noalias() += G.transpose() * A.transpose();
                           }
                         }
                       }
                     });
}

// ------------------------------------------------------------- normalization

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("softmax", "scalar input");
  const int64_t n = x.dim(-1);
  const int64_t rows = n ? x.numel() / n : 0;
  Buffer out(static_cast<size_t>(x.numel()));
  const Real* xd = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const Real* in = xd + r * n;
    Real* o = out.data() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real total = 0;
    for (int64_t k = 0; k < n; ++k) {
      o[k] = std::exp(in[k] - mx);
      total += o[k];
    }
    const Real inv = Real(1) / total;
    for (int64_t k = 0; k < n; ++k) o[k] *= inv;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, n](Node& self) {
    Real* g = parent_grad(self, 0);
    if (!g) return;
    for (int64_t r = 0; r < rows; ++r) {
      const Real* y = self.data.data() + r * n;
      const Real* gy = self.grad.data() + r * n;
      Real dot = 0;
      for (int64_t k = 0; k < n; ++k) dot += gy[k] * y[k];
      for (int64_t k = 0; k < n; ++k) g[r * n + k] += y[k] * (gy[k] - dot);
    }
  });
}

namespace {

// Normalizes `groups` contiguous runs of `len` values, then applies a
// per-channel affine map where channel(group, k) is supplied by `channel_of`.
struct NormStats {
  std::vector<Real> xhat;
  std::vector<Real> inv_std;
};

NormStats normalize_groups(const Real* x, int64_t groups, int64_t len, Real eps) {
  NormStats s;
  s.xhat.resize(static_cast<size_t>(groups * len));
  s.inv_std.resize(static_cast<size_t>(groups));
  for (int64_t gi = 0; gi < groups; ++gi) {
    const Real* in = x + gi * len;
    double mu = 0;
    for (int64_t k = 0; k < len; ++k) mu += in[k];
    mu /= static_cast<double>(len);
    double var = 0;
    for (int64_t k = 0; k < len; ++k) var += (in[k] - mu) * (in[k] - mu);
    var /= static_cast<double>(len);
    const Real inv = static_cast<Real>(1.0 / std::sqrt(var + eps));
    s.inv_std[gi] = inv;
    for (int64_t k = 0; k < len; ++k) s.xhat[gi * len + k] = static_cast<Real>((in[k] - mu)) * inv;
  }
  return s;
}

// dx for y = xhat * scale_k: dxhat = gy * scale, dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
void normalize_backward(const Real* dxhat, const Real* xhat, Real inv, int64_t len, Real* gx) {
  double m1 = 0, m2 = 0;
  for (int64_t k = 0; k < len; ++k) {
    m1 += dxhat[k];
    m2 += static_cast<double>(dxhat[k]) * xhat[k];
  }
  m1 /= static_cast<double>(len);
  m2 /= static_cast<double>(len);
  for (int64_t k = 0; k < len; ++k) {
    gx[k] += inv * static_cast<Real>(dxhat[k] - m1 - xhat[k] * m2);
  }
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  require_rank("layer_norm", gamma, 1);
  require_rank("layer_norm", beta, 1);
  const int64_t n = x.dim(-1);
  if (gamma.dim(0) != n || beta.dim(0) != n) {
    throw ShapeError("layer_norm", shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  }
  const int64_t rows = x.numel() / n;
  auto stats = std::make_shared<NormStats>(normalize_groups(x.data().data(), rows, n, eps));
  Buffer out(static_cast<size_t>(x.numel()));
  const Real* gd = gamma.data().data();
  const Real* bd = beta.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t k = 0; k < n; ++k) out[r * n + k] = stats->xhat[r * n + k] * gd[k] + bd[k];
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [stats, rows, n](Node& self) {
    const Real* gd = parent_data(self, 1);
    Real* gx = parent_grad(self, 0);
    Real* gg = parent_grad(self, 1);
    Real* gb = parent_grad(self, 2);
    std::vector<Real> dxhat(static_cast<size_t>(n));
    for (int64_t r = 0; r < rows; ++r) {
      const Real* gy = self.grad.data() + r * n;
      const Real* xh = stats->xhat.data() + r * n;
      if (gg) for (int64_t k = 0; k < n; ++k) gg[k] += gy[k] * xh[k];
      if (gb) for (int64_t k = 0; k < n; ++k) gb[k] += gy[k];
      if (gx) {
        for (int64_t k = 0; k < n; ++k) dxhat[k] = gy[k] * gd[k];
        normalize_backward(dxhat.data(), xh, stats->inv_std[r], n, gx + r * n);
      }
    }
  });
}

Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  require_rank("channel_norm", x, 4);
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C) {
    throw ShapeError("channel_norm", shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  }
  // Pixels are the contiguous axis, so every loop below runs over them.
  auto stats = std::make_shared<NormStats>();
  stats->xhat.resize(static_cast<size_t>(x.numel()));
  stats->inv_std.resize(static_cast<size_t>(B * HW));
  Buffer out(static_cast<size_t>(x.numel()));
  const Real* gd = gamma.data().data();
  const Real* bd = beta.data().data();
  std::vector<double> mu(static_cast<size_t>(HW)), var(static_cast<size_t>(HW));
  for (int64_t b = 0; b < B; ++b) {
    const Real* in = x.data().data() + b * C * HW;
    Real* xh = stats->xhat.data() + b * C * HW;
    Real* inv = stats->inv_std.data() + b * HW;
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t p = 0; p < HW; ++p) mu[p] += in[c * HW + p];
    }
    for (int64_t p = 0; p < HW; ++p) mu[p] /= static_cast<double>(C);
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t p = 0; p < HW; ++p) {
        const double d = in[c * HW + p] - mu[p];
        var[p] += d * d;
      }
    }
    for (int64_t p = 0; p < HW; ++p) inv[p] = static_cast<Real>(1.0 / std::sqrt(var[p] / static_cast<double>(C) + eps));
    for (int64_t c = 0; c < C; ++c) {
      Real* o = out.data() + b * C * HW + c * HW;
      for (int64_t p = 0; p < HW; ++p) {
        const Real v = static_cast<Real>(in[c * HW + p] - mu[p]) * inv[p];
        xh[c * HW + p] = v;
        o[p] = v * gd[c] + bd[c];
      }
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [stats, B, C, HW](Node& self) {
    const Real* gd = parent_data(self, 1);
    Real* gx = parent_grad(self, 0);
    Real* gg = parent_grad(self, 1);
    Real* gb = parent_grad(self, 2);
    std::vector<Real> m1(static_cast<size_t>(HW)), m2(static_cast<size_t>(HW));
    const Real inv_c = static_cast<Real>(1.0 / static_cast<double>(C));
    for (int64_t b = 0; b < B; ++b) {
      const Real* gy = self.grad.data() + b * C * HW;
      const Real* xh = stats->xhat.data() + b * C * HW;
      const Real* inv = stats->inv_std.data() + b * HW;
      for (int64_t c = 0; c < C; ++c) {
        if (gg) {
          Real acc = 0;
          for (int64_t p = 0; p < HW; ++p) acc += gy[c * HW + p] * xh[c * HW + p];
          gg[c] += acc;
        }
        if (gb) {
          Real acc = 0;
          for (int64_t p = 0; p < HW; ++p) acc += gy[c * HW + p];
          gb[c] += acc;
        }
      }
      if (!gx) continue;
      std::fill(m1.begin(), m1.end(), Real(0));
      std::fill(m2.begin(), m2.end(), Real(0));
      for (int64_t c = 0; c < C; ++c) {
        for (int64_t p = 0; p < HW; ++p) {
          const Real d = gy[c * HW + p] * gd[c];
          m1[p] += d;
          m2[p] += d * xh[c * HW + p];
        }
      }
      Real* g = gx + b * C * HW;
      for (int64_t c = 0; c < C; ++c) {
        for (int64_t p = 0; p < HW; ++p) {
          const Real d = gy[c * HW + p] * gd[c];
          g[c * HW + p] += inv[p] * (d - m1[p] * inv_c - xh[c * HW + p] * m2[p] * inv_c);
        }
      }
    }
  });
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  require_rank("instance_norm", x, 4);
  const int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C) {
    throw ShapeError("instance_norm", shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  }
  auto stats = std::make_shared<NormStats>(normalize_groups(x.data().data(), B * C, HW, eps));
  Buffer out(static_cast<size_t>(x.numel()));
  const Real* gd = gamma.data().data();
  const Real* bd = beta.data().data();
  for (int64_t gi = 0; gi < B * C; ++gi) {
    const int64_t c = gi % C;
    for (int64_t k = 0; k < HW; ++k) out[gi * HW + k] = stats->xhat[gi * HW + k] * gd[c] + bd[c];
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta}, [stats, B, C, HW](Node& self) {
    const Real* gd = parent_data(self, 1);
    Real* gx = parent_grad(self, 0);
    Real* gg = parent_grad(self, 1);
    Real* gb = parent_grad(self, 2);
    std::vector<Real> dxhat(static_cast<size_t>(HW));
    for (int64_t gi = 0; gi < B * C; ++gi) {
      const int64_t c = gi % C;
      const Real* gy = self.grad.data() + gi * HW;
      const Real* xh = stats->xhat.data() + gi * HW;
      if (gg) {
        Real acc = 0;
        for (int64_t k = 0; k < HW; ++k) acc += gy[k] * xh[k];
        gg[c] += acc;
      }
      if (gb) {
        Real acc = 0;
        for (int64_t k = 0; k < HW; ++k) acc += gy[k];
        gb[c] += acc;
      }
      if (gx) {
        for (int64_t k = 0; k < HW; ++k) dxhat[k] = gy[k] * gd[c];
        normalize_backward(dxhat.data(), xh, stats->inv_std[gi], HW, gx + gi * HW);
      }
    }
  });
}

// ---------------------------------------------------------------- image ops

namespace {

struct ConvGeom {
  int64_t B, C, H, W, O, kh, kw, Ho, Wo;
  int stride, pad;
  int64_t ckk() const { return C * kh * kw; }
  int64_t cols() const { return B * Ho * Wo; }
};

// cols[(c*kh + i)*kw + j, b*Ho*Wo + oh*Wo + ow]
void im2col(const Real* x, const ConvGeom& g, Real* cols) {
  const int64_t ncol = g.cols();
  for (int64_t c = 0; c < g.C; ++c) {
    for (int64_t i = 0; i < g.kh; ++i) {
      for (int64_t j = 0; j < g.kw; ++j) {
        Real* row = cols + ((c * g.kh + i) * g.kw + j) * ncol;
        for (int64_t b = 0; b < g.B; ++b) {
          const Real* img = x + (b * g.C + c) * g.H * g.W;
          Real* dst = row + b * g.Ho * g.Wo;
          for (int64_t oh = 0; oh < g.Ho; ++oh) {
            const int64_t ih = oh * g.stride - g.pad + i;
            if (ih < 0 || ih >= g.H) {
              std::fill_n(dst + oh * g.Wo, g.Wo, Real(0));
              continue;
            }
            for (int64_t ow = 0; ow < g.Wo; ++ow) {
              const int64_t iw = ow * g.stride - g.pad + j;
              dst[oh * g.Wo + ow] = (iw >= 0 && iw < g.W) ? img[ih * g.W + iw] : Real(0);
            }
          }
        }
      }
    }
  }
}

void col2im_add(const Real* cols, const ConvGeom& g, Real* gx) {
  const int64_t ncol = g.cols();
  for (int64_t c = 0; c < g.C; ++c) {
    for (int64_t i = 0; i < g.kh; ++i) {
      for (int64_t j = 0; j < g.kw; ++j) {
        const Real* row = cols + ((c * g.kh + i) * g.kw + j) * ncol;
        for (int64_t b = 0; b < g.B; ++b) {
          Real* img = gx + (b * g.C + c) * g.H * g.W;
          const Real* src = row + b * g.Ho * g.Wo;
          for (int64_t oh = 0; oh < g.Ho; ++oh) {
            const int64_t ih = oh * g.stride - g.pad + i;
            if (ih < 0 || ih >= g.H) continue;
            for (int64_t ow = 0; ow < g.Wo; ++ow) {
              const int64_t iw = ow * g.stride - g.pad + j;
              if (iw >= 0 && iw < g.W) img[ih * g.W + iw] += src[oh * g.Wo + ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  if (stride < 1 || padding < 0) throw ShapeError("conv2d", "invalid stride/padding");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), 0, 0, stride, padding};
  if (weight.dim(1) != g.C) {
    throw ShapeError("conv2d", "input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  }
  g.Ho = (g.H + 2 * padding - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * padding - g.kw) / stride + 1;
  if (g.Ho <= 0 || g.Wo <= 0) throw ShapeError("conv2d", "kernel larger than padded input " + shape_str(x.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != g.O) throw ShapeError("conv2d", "bias " + shape_str(bias.shape()));

  Buffer cols(static_cast<size_t>(g.ckk() * g.cols()));
  im2col(x.data().data(), g, cols.data());
  RowMat out_mat(g.O, g.cols());
  out_mat.noalias() = ConstMapMat(weight.data().data(), g.O, g.ckk()) * ConstMapMat(cols.data(), g.ckk(), g.cols());
  const int64_t plane = g.Ho * g.Wo;
  Buffer out(static_cast<size_t>(g.B * g.O * plane));
  const Real* bd = has_bias ? bias.data().data() : nullptr;
  for (int64_t b = 0; b < g.B; ++b) {
    for (int64_t o = 0; o < g.O; ++o) {
      const Real* src = out_mat.data() + o * g.cols() + b * plane;
      Real* dst = out.data() + (b * g.O + o) * plane;
      const Real bias_v = bd ? bd[o] : Real(0);
      for (int64_t k = 0; k < plane; ++k) dst[k] = src[k] + bias_v;
    }
  }
  return make_result({g.B, g.O, g.Ho, g.Wo}, std::move(out), {x, weight, bias}, [g, has_bias, plane](Node& self) {
    RowMat gmat(g.O, g.cols());
    for (int64_t b = 0; b < g.B; ++b) {
      for (int64_t o = 0; o < g.O; ++o) {
        std::copy_n(self.grad.data() + (b * g.O + o) * plane, plane, gmat.data() + o * g.cols() + b * plane);
      }
    }
    Real* gx = parent_grad(self, 0);
    Real* gw = parent_grad(self, 1);
    if (gw) {
      Buffer cols(static_cast<size_t>(g.ckk() * g.cols()));
      im2col(parent_data(self, 0), g, cols.data());
      MapMat(gw, g.O, g.ckk()).noalias() += gmat * ConstMapMat(cols.data(), g.ckk(), g.cols()).transpose();
    }
    if (gx) {
      RowMat dcols(g.ckk(), g.cols());
      dcols.noalias() = ConstMapMat(parent_data(self, 1), g.O, g.ckk()).transpose() * gmat;
      col2im_add(dcols.data(), g, gx);
    }
    if (has_bias) {
      if (Real* gb = parent_grad(self, 2)) {
        for (int64_t o = 0; o < g.O; ++o) gb[o] += gmat.row(o).sum();
      }
    }
  });
}

Tensor avg_pool2x2(const Tensor& x) {
  require_rank("avg_pool2x2", x, 4);
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw ShapeError("avg_pool2x2", "odd spatial size " + shape_str(x.shape()));
  const int64_t Ho = H / 2, Wo = W / 2;
  Buffer out(static_cast<size_t>(B * C * Ho * Wo));
  const Real* xd = x.data().data();
  for (int64_t p = 0; p < B * C; ++p) {
    const Real* in = xd + p * H * W;
    Real* o = out.data() + p * Ho * Wo;
    for (int64_t i = 0; i < Ho; ++i) {
      for (int64_t j = 0; j < Wo; ++j) {
        const int64_t r = 2 * i, c = 2 * j;
        o[i * Wo + j] = (in[r * W + c] + in[r * W + c + 1] + in[(r + 1) * W + c] + in[(r + 1) * W + c + 1]) * Real(0.25);
      }
    }
  }
  return make_result({B, C, Ho, Wo}, std::move(out), {x}, [B, C, H, W, Ho, Wo](Node& self) {
    Real* g = parent_grad(self, 0);
    if (!g) return;
    for (int64_t p = 0; p < B * C; ++p) {
      const Real* gy = self.grad.data() + p * Ho * Wo;
      Real* gi = g + p * H * W;
      for (int64_t i = 0; i < Ho; ++i) {
        for (int64_t j = 0; j < Wo; ++j) {
          const Real v = gy[i * Wo + j] * Real(0.25);
          const int64_t r = 2 * i, c = 2 * j;
          gi[r * W + c] += v;
          gi[r * W + c + 1] += v;
          gi[(r + 1) * W + c] += v;
          gi[(r + 1) * W + c + 1] += v;
        }
      }
    }
  });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  return make_result({}, {total}, {x}, [](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      const Real gy = self.grad[0];
      const size_t n = self.parents[0]->data.size();
      for (size_t i = 0; i < n; ++i) g[i] += gy;
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

Tensor weighted_l1(const Tensor& a, std::span<const Real> target, std::span<const Real> weight) {
  const size_t n = static_cast<size_t>(a.numel());
  if (target.size() != n || weight.size() != n) {
    throw ShapeError("weighted_l1", "input " + shape_str(a.shape()) + " with " + std::to_string(target.size()) +
                                        " targets and " + std::to_string(weight.size()) + " weights");
  }
  auto tgt = std::make_shared<std::vector<Real>>(target.begin(), target.end());
  auto w = std::make_shared<std::vector<Real>>(weight.begin(), weight.end());
  const Real* ad = a.data().data();
  Real total = 0;
  for (size_t i = 0; i < n; ++i) total += (*w)[i] * std::abs(ad[i] - (*tgt)[i]);
  return make_result({}, {total}, {a}, [tgt, w](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      const Real* ad = parent_data(self, 0);
      const Real gy = self.grad[0];
      for (size_t i = 0; i < tgt->size(); ++i) {
        const Real d = ad[i] - (*tgt)[i];
        const Real s = d > 0 ? Real(1) : (d < 0 ? Real(-1) : Real(0));
        g[i] += gy * (*w)[i] * s;
      }
    }
  });
}

Tensor weighted_bce_with_logits(const Tensor& logits, std::span<const Real> target, std::span<const Real> weight) {
  const size_t n = static_cast<size_t>(logits.numel());
  if (target.size() != n || weight.size() != n) {
    throw ShapeError("weighted_bce_with_logits", "input " + shape_str(logits.shape()) + " with " +
                                                     std::to_string(target.size()) + " targets");
  }
  auto tgt = std::make_shared<std::vector<Real>>(target.begin(), target.end());
  auto w = std::make_shared<std::vector<Real>>(weight.begin(), weight.end());
  const Real* xd = logits.data().data();
  double total = 0;
  for (size_t i = 0; i < n; ++i) {
    const double x = xd[i], y = (*tgt)[i];
    total += (*w)[i] * (std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))));
  }
  return make_result({}, {static_cast<Real>(total)}, {logits}, [tgt, w](Node& self) {
    if (Real* g = parent_grad(self, 0)) {
      const Real* xd = parent_data(self, 0);
      const Real gy = self.grad[0];
      for (size_t i = 0; i < tgt->size(); ++i) {
        const Real x = xd[i];
        const Real s = x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
        g[i] += gy * (*w)[i] * (s - (*tgt)[i]);
      }
    }
  });
}

}  // namespace mvt
