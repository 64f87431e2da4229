#pragma once

// Dense double-precision arrays and a tape-free reverse-mode autograd.
//
// A Tensor is a shared handle to a graph node. Ops build new nodes that keep
// their inputs alive; backward() walks the graph in reverse topological order
// and accumulates into every node that requires a gradient.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sslkit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Plain value-semantics array used for data, checkpoints and reports.
struct NdArray {
  Shape shape;
  std::vector<double> data;

  NdArray() = default;
  explicit NdArray(Shape s, double fill = 0.0);
  NdArray(Shape s, std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool operator==(const NdArray&) const = default;
};

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(NdArray a);
  static Tensor constant(Shape s, std::vector<double> values);
  static Tensor scalar(double v);
  /// Leaf that accumulates gradients.
  static Tensor parameter(NdArray a);
  static Tensor zeros(Shape s);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  /// In-place access for optimizers and EMA updates. Never call on a node
  /// that is part of a live graph awaiting backward().
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  double item() const;
  double at(std::size_t flat_index) const { return node_->value.at(flat_index); }
  NdArray array() const { return NdArray(node_->shape, node_->value); }

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Reverse-mode accumulation seeded with `seed` at this node.
  void backward(double seed = 1.0) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

enum class Precision { kFull, kMixed };

/// Thread-local compute precision for matrix products. In kMixed mode the
/// operands and results of every product are rounded to binary16.
class PrecisionGuard {
 public:
  explicit PrecisionGuard(Precision p);
  ~PrecisionGuard();
  PrecisionGuard(const PrecisionGuard&) = delete;
  PrecisionGuard& operator=(const PrecisionGuard&) = delete;

 private:
  Precision previous_;
};
Precision current_precision();

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

namespace ops {

// Elementwise. `b` may be the same shape as `a` or match a trailing suffix of
// a's shape, in which case it is broadcast over the leading dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
/// a * s where s is a one-element tensor that receives a gradient.
Tensor scale_by(const Tensor& a, const Tensor& s);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// [m, n] -> [m]
Tensor sum_cols(const Tensor& a);
/// [m, n] -> [n]
Tensor sum_rows(const Tensor& a);
Tensor mean_rows(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);

/// out.flat[i] = a.flat[index[i]], or 0 where index[i] < 0.
Tensor gather(const Tensor& a, IndexMap index, Shape out_shape);
/// out[dst[e], :] += weight[e] * x[src[e], :]; weights may be empty (all 1).
Tensor scatter_add_rows(const Tensor& x, std::span<const std::int64_t> src,
                        std::span<const std::int64_t> dst,
                        std::span<const double> weight, std::size_t out_rows);
Tensor select_rows(const Tensor& a, std::span<const std::int64_t> rows);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// Concatenation along dim 0; trailing shapes must agree.
Tensor concat_rows(std::span<const Tensor> parts);
/// Concatenation of 2-D tensors along dim 1.
Tensor concat_cols(std::span<const Tensor> parts);

/// x [m, k] * w [n, k]^T + b [n]; leading dims of x are flattened.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
/// a [m, k] * b [n, k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// Batched: a [g, m, k] * b [g, k, n]
Tensor bmm(const Tensor& a, const Tensor& b);
/// Batched: a [g, m, k] * b [g, n, k]^T
Tensor bmm_nt(const Tensor& a, const Tensor& b);

/// Row-wise x / max(||x||, eps) over the last dim.
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-8);
/// Row-wise ops over the last dim. -inf entries are treated as excluded.
Tensor log_softmax_rows(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
/// Mean cross-entropy of rows of `logits` against integer targets.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

}  // namespace ops

}  // namespace sslkit
