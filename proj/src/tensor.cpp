#include "sslkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "sslkit/kernels.hpp"

namespace sslkit {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

NdArray::NdArray(Shape s, double fill) : shape(std::move(s)) {
  data.assign(shape_numel(shape), fill);
}

NdArray::NdArray(Shape s, std::vector<double> values)
    : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("NdArray: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  }
}

namespace {

thread_local bool t_grad_enabled = true;
thread_local Precision t_precision = Precision::kFull;

NodePtr leaf(Shape shape, std::vector<double> value, bool requires_grad) {
  if (shape_numel(shape) != value.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not hold " +
                     std::to_string(value.size()) + " values");
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

// Creates an op output. Inputs and the backward closure are only retained
// when a gradient can flow.
Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<NodePtr> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

bool mixed() { return t_precision == Precision::kMixed; }

std::vector<double> maybe_half(std::span<const double> v, bool on) {
  std::vector<double> out(v.begin(), v.end());
  if (on) kernels::round_to_half(out.data(), out.size());
  return out;
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

PrecisionGuard::PrecisionGuard(Precision p) : previous_(t_precision) {
  t_precision = p;
}
PrecisionGuard::~PrecisionGuard() { t_precision = previous_; }
Precision current_precision() { return t_precision; }

Tensor Tensor::constant(NdArray a) {
  return Tensor(leaf(std::move(a.shape), std::move(a.data), false));
}
Tensor Tensor::constant(Shape s, std::vector<double> values) {
  return Tensor(leaf(std::move(s), std::move(values), false));
}
Tensor Tensor::scalar(double v) { return Tensor(leaf({1}, {v}, false)); }
Tensor Tensor::parameter(NdArray a) {
  return Tensor(leaf(std::move(a.shape), std::move(a.data), true));
}
Tensor Tensor::zeros(Shape s) {
  const std::size_t n = shape_numel(s);
  return Tensor(leaf(std::move(s), std::vector<double>(n, 0.0), false));
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

Tensor Tensor::detach() const {
  return Tensor(leaf(node_->shape, node_->value, false));
}

void Tensor::backward(double seed) const {
  if (!node_->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  auto& g = node_->ensure_grad();
  for (double& v : g) v += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (n->backward_fn) n->grad.clear();
  }
}

namespace ops {

namespace {

enum class Bcast { kSame, kPeriodic };

Bcast check_bcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (b.numel() == 1) return Bcast::kPeriodic;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  bool suffix = bs.size() <= as.size() &&
                std::equal(bs.begin(), bs.end(), as.end() - bs.size());
  require(suffix, std::string(op) + ": cannot broadcast " + shape_str(bs) +
                      " onto " + shape_str(as));
  return Bcast::kPeriodic;
}

template <class Fwd, class Da, class Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
              Da da, Db db) {
  check_bcast(a, b, name);
  const std::size_t n = a.numel();
  const std::size_t p = b.numel();
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i % p]);
  return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                 [n, p, da, db](Node& self) {
                   Node& an = *self.inputs[0];
                   Node& bn = *self.inputs[1];
                   const auto& g = self.grad;
                   if (an.requires_grad) {
                     auto& ga = an.ensure_grad();
                     for (std::size_t i = 0; i < n; ++i)
                       ga[i] += g[i] * da(an.value[i], bn.value[i % p]);
                   }
                   if (bn.requires_grad) {
                     auto& gb = bn.ensure_grad();
                     for (std::size_t i = 0; i < n; ++i)
                       gb[i % p] += g[i] * db(an.value[i], bn.value[i % p]);
                   }
                 });
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_op(a.shape(), std::move(out), {a.node()}, [deriv](Node& self) {
    Node& an = *self.inputs[0];
    auto& ga = an.ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i)
      ga[i] += self.grad[i] * deriv(an.value[i], self.value[i]);
  });
}

std::pair<std::size_t, std::size_t> as_matrix(const Tensor& a) {
  require(a.rank() >= 1, "expected at least a 1-D tensor");
  const std::size_t cols = a.shape().back();
  return {cols == 0 ? 0 : a.numel() / cols, cols};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  require(s.numel() == 1, "scale_by: scale must hold one value");
  return mul(a, s);
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kK = 0.044715;
  return unary(
      a,
      [](double x) {
        return 0.5 * x * (1.0 + std::tanh(kC * (x + kK * x * x * x)));
      },
      [](double x, double) {
        const double t = std::tanh(kC * (x + kK * x * x * x));
        return 0.5 * (1.0 + t) +
               0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kK * x * x);
      });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  const double s = kernels::sum(a.values().data(), a.numel());
  return make_op({1}, {s}, {a.node()}, [](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    const double g = self.grad[0];
    for (double& v : ga) v += g;
  });
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_cols(const Tensor& a) {
  auto [m, n] = as_matrix(a);
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i)
    out[i] = kernels::sum(a.values().data() + i * n, n);
  return make_op({m}, std::move(out), {a.node()}, [m, n](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[i];
  });
}

Tensor sum_rows(const Tensor& a) {
  auto [m, n] = as_matrix(a);
  std::vector<double> out(n, 0.0);
  const auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  return make_op({n}, std::move(out), {a.node()}, [m, n](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j];
  });
}

Tensor mean_rows(const Tensor& a) {
  auto [m, n] = as_matrix(a);
  require(m > 0, "mean_rows of empty tensor");
  return mul_scalar(sum_rows(a), 1.0 / static_cast<double>(m));
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> v(a.values().begin(), a.values().end());
  return make_op(std::move(shape), std::move(v), {a.node()}, [](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose expects a 2-D tensor");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_op({n, m}, std::move(out), {a.node()}, [m, n](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
  });
}

Tensor gather(const Tensor& a, IndexMap index, Shape out_shape) {
  require(shape_numel(out_shape) == index->size(),
          "gather: index size does not match output shape");
  const auto av = a.values();
  const auto& idx = *index;
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::int64_t s = idx[i];
    require(s < static_cast<std::int64_t>(av.size()), "gather: index out of range");
    out[i] = s < 0 ? 0.0 : av[static_cast<std::size_t>(s)];
  }
  return make_op(std::move(out_shape), std::move(out), {a.node()},
                 [index](Node& self) {
                   auto& ga = self.inputs[0]->ensure_grad();
                   const auto& idx = *index;
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     if (idx[i] >= 0) ga[static_cast<std::size_t>(idx[i])] += self.grad[i];
                   }
                 });
}

Tensor scatter_add_rows(const Tensor& x, std::span<const std::int64_t> src,
                        std::span<const std::int64_t> dst,
                        std::span<const double> weight, std::size_t out_rows) {
  auto [m, f] = as_matrix(x);
  require(src.size() == dst.size(), "scatter_add_rows: src/dst length mismatch");
  require(weight.empty() || weight.size() == src.size(),
          "scatter_add_rows: weight length mismatch");
  std::vector<std::int64_t> s(src.begin(), src.end());
  std::vector<std::int64_t> d(dst.begin(), dst.end());
  std::vector<double> w(weight.begin(), weight.end());
  std::vector<double> out(out_rows * f, 0.0);
  const auto xv = x.values();
  for (std::size_t e = 0; e < s.size(); ++e) {
    require(s[e] >= 0 && static_cast<std::size_t>(s[e]) < m &&
                d[e] >= 0 && static_cast<std::size_t>(d[e]) < out_rows,
            "scatter_add_rows: index out of range");
    kernels::axpy(w.empty() ? 1.0 : w[e], xv.data() + s[e] * f,
                  out.data() + d[e] * f, f);
  }
  return make_op({out_rows, f}, std::move(out), {x.node()},
                 [s = std::move(s), d = std::move(d), w = std::move(w), f](Node& self) {
                   auto& gx = self.inputs[0]->ensure_grad();
                   for (std::size_t e = 0; e < s.size(); ++e) {
                     kernels::axpy(w.empty() ? 1.0 : w[e], self.grad.data() + d[e] * f,
                                   gx.data() + s[e] * f, f);
                   }
                 });
}

Tensor select_rows(const Tensor& a, std::span<const std::int64_t> rows) {
  auto [m, n] = as_matrix(a);
  std::vector<std::int64_t> r(rows.begin(), rows.end());
  std::vector<double> out(r.size() * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < r.size(); ++i) {
    require(r[i] >= 0 && static_cast<std::size_t>(r[i]) < m,
            "select_rows: row out of range");
    std::copy_n(av.data() + r[i] * n, n, out.data() + i * n);
  }
  Shape shape = a.shape();
  shape[0] = r.size();
  if (a.rank() > 2) shape = {r.size(), n};
  return make_op(std::move(shape), std::move(out), {a.node()},
                 [r = std::move(r), n](Node& self) {
                   auto& ga = self.inputs[0]->ensure_grad();
                   for (std::size_t i = 0; i < r.size(); ++i)
                     kernels::axpy(1.0, self.grad.data() + i * n,
                                   ga.data() + r[i] * n, n);
                 });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require(a.rank() >= 1 && begin <= end && end <= a.dim(0),
          "slice_rows: bad range");
  const std::size_t stride = a.dim(0) == 0 ? 0 : a.numel() / a.dim(0);
  std::vector<double> out(a.values().begin() + begin * stride,
                          a.values().begin() + end * stride);
  Shape shape = a.shape();
  shape[0] = end - begin;
  return make_op(std::move(shape), std::move(out), {a.node()},
                 [begin, stride](Node& self) {
                   auto& ga = self.inputs[0]->ensure_grad();
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     ga[begin * stride + i] += self.grad[i];
                 });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<NodePtr> inputs;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    require(p.rank() == shape.size() &&
                std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1),
            "concat_rows: trailing shapes differ");
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
    inputs.push_back(p.node());
    sizes.push_back(p.numel());
  }
  shape[0] = rows;
  return make_op(std::move(shape), std::move(out), std::move(inputs),
                 [sizes = std::move(sizes)](Node& self) {
                   std::size_t off = 0;
                   for (std::size_t k = 0; k < sizes.size(); ++k) {
                     Node& in = *self.inputs[k];
                     if (in.requires_grad) {
                       auto& g = in.ensure_grad();
                       for (std::size_t i = 0; i < sizes[k]; ++i)
                         g[i] += self.grad[off + i];
                     }
                     off += sizes[k];
                   }
                 });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.dim(0) == m, "concat_cols: expects 2-D, equal rows");
    widths.push_back(p.dim(1));
    total += p.dim(1);
    inputs.push_back(p.node());
  }
  std::vector<double> out(m * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(v.data() + i * widths[k], widths[k], out.data() + i * total + col);
    col += widths[k];
  }
  return make_op({m, total}, std::move(out), std::move(inputs),
                 [widths = std::move(widths), m, total](Node& self) {
                   std::size_t c = 0;
                   for (std::size_t k = 0; k < widths.size(); ++k) {
                     Node& in = *self.inputs[k];
                     if (in.requires_grad) {
                       auto& g = in.ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < widths[k]; ++j)
                           g[i * widths[k] + j] += self.grad[i * total + c + j];
                     }
                     c += widths[k];
                   }
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.rank() == 2, "linear: weight must be 2-D");
  auto [m, k] = as_matrix(x);
  const std::size_t n = w.dim(0);
  require(w.dim(1) == k, "linear: input width " + std::to_string(k) +
                             " does not match weight " + shape_str(w.shape()));
  const bool has_bias = b.defined();
  if (has_bias) require(b.numel() == n, "linear: bias size mismatch");
  const bool half = mixed();
  auto xv = std::make_shared<std::vector<double>>(maybe_half(x.values(), half));
  auto wv = std::make_shared<std::vector<double>>(maybe_half(w.values(), half));
  std::vector<double> out(m * n);
  kernels::gemm_nt(m, n, k, xv->data(), wv->data(), out.data(), false);
  if (has_bias) {
    const auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i) kernels::axpy(1.0, bv.data(), out.data() + i * n, n);
  }
  if (half) kernels::round_to_half(out.data(), out.size());
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<NodePtr> inputs{x.node(), w.node()};
  if (has_bias) inputs.push_back(b.node());
  return make_op(std::move(shape), std::move(out), std::move(inputs),
                 [xv, wv, m, n, k, has_bias, half](Node& self) {
                   std::vector<double> g = maybe_half(self.grad, half);
                   Node& xn = *self.inputs[0];
                   Node& wn = *self.inputs[1];
                   if (xn.requires_grad)
                     kernels::gemm_nn(m, k, n, g.data(), wv->data(),
                                      xn.ensure_grad().data(), true);
                   if (wn.requires_grad)
                     kernels::gemm_tn(n, k, m, g.data(), xv->data(),
                                      wn.ensure_grad().data(), true);
                   if (has_bias && self.inputs[2]->requires_grad) {
                     auto& gb = self.inputs[2]->ensure_grad();
                     for (std::size_t i = 0; i < m; ++i)
                       kernels::axpy(1.0, g.data() + i * n, gb.data(), n);
                   }
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool half = mixed();
  auto av = std::make_shared<std::vector<double>>(maybe_half(a.values(), half));
  auto bv = std::make_shared<std::vector<double>>(maybe_half(b.values(), half));
  std::vector<double> out(m * n);
  kernels::gemm_nn(m, n, k, av->data(), bv->data(), out.data(), false);
  if (half) kernels::round_to_half(out.data(), out.size());
  return make_op({m, n}, std::move(out), {a.node(), b.node()},
                 [av, bv, m, n, k, half](Node& self) {
                   std::vector<double> g = maybe_half(self.grad, half);
                   if (self.inputs[0]->requires_grad)
                     kernels::gemm_nt(m, k, n, g.data(), bv->data(),
                                      self.inputs[0]->ensure_grad().data(), true);
                   if (self.inputs[1]->requires_grad)
                     kernels::gemm_tn(k, n, m, av->data(), g.data(),
                                      self.inputs[1]->ensure_grad().data(), true);
                 });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  return linear(a, b, Tensor());
}

namespace {

Tensor batched(const Tensor& a, const Tensor& b, bool b_transposed) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
          "bmm: expects [g, m, k] operands");
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = b_transposed ? b.dim(1) : b.dim(2);
  require((b_transposed ? b.dim(2) : b.dim(1)) == k, "bmm: inner dims differ");
  const bool half = mixed();
  auto av = std::make_shared<std::vector<double>>(maybe_half(a.values(), half));
  auto bv = std::make_shared<std::vector<double>>(maybe_half(b.values(), half));
  std::vector<double> out(g * m * n);
  for (std::size_t s = 0; s < g; ++s) {
    const double* ap = av->data() + s * m * k;
    const double* bp = bv->data() + s * k * n;
    double* cp = out.data() + s * m * n;
    if (b_transposed) {
      kernels::gemm_nt(m, n, k, ap, bp, cp, false);
    } else {
      kernels::gemm_nn(m, n, k, ap, bp, cp, false);
    }
  }
  if (half) kernels::round_to_half(out.data(), out.size());
  return make_op(
      {g, m, n}, std::move(out), {a.node(), b.node()},
      [av, bv, g, m, n, k, half, b_transposed](Node& self) {
        std::vector<double> gr = maybe_half(self.grad, half);
        Node& an = *self.inputs[0];
        Node& bn = *self.inputs[1];
        for (std::size_t s = 0; s < g; ++s) {
          const double* gp = gr.data() + s * m * n;
          const double* ap = av->data() + s * m * k;
          const double* bp = bv->data() + s * k * n;
          if (an.requires_grad) {
            double* ga = an.ensure_grad().data() + s * m * k;
            if (b_transposed) {
              kernels::gemm_nn(m, k, n, gp, bp, ga, true);
            } else {
              kernels::gemm_nt(m, k, n, gp, bp, ga, true);
            }
          }
          if (bn.requires_grad) {
            double* gb = bn.ensure_grad().data() + s * k * n;
            if (b_transposed) {
              kernels::gemm_tn(n, k, m, gp, ap, gb, true);
            } else {
              kernels::gemm_tn(k, n, m, ap, gp, gb, true);
            }
          }
        }
      });
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) { return batched(a, b, false); }
Tensor bmm_nt(const Tensor& a, const Tensor& b) { return batched(a, b, true); }

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  auto [m, n] = as_matrix(a);
  const auto av = a.values();
  std::vector<double> out(a.numel());
  auto norms = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = av.data() + i * n;
    const double nr = std::sqrt(kernels::dot(row, row, n));
    (*norms)[i] = nr;
    const double d = std::max(nr, eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] / d;
  }
  return make_op(a.shape(), std::move(out), {a.node()},
                 [norms, m, n, eps](Node& self) {
                   auto& ga = self.inputs[0]->ensure_grad();
                   for (std::size_t i = 0; i < m; ++i) {
                     const double* y = self.value.data() + i * n;
                     const double* gy = self.grad.data() + i * n;
                     const double nr = (*norms)[i];
                     if (nr > eps) {
                       const double yg = kernels::dot(y, gy, n);
                       for (std::size_t j = 0; j < n; ++j)
                         ga[i * n + j] += (gy[j] - y[j] * yg) / nr;
                     } else {
                       for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[j] / eps;
                     }
                   }
                 });
}

namespace {

// Returns log-sum-exp of a row, ignoring -inf entries.
double row_lse(const double* x, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
  return mx + std::log(s);
}

}  // namespace

Tensor log_softmax_rows(const Tensor& a) {
  auto [m, n] = as_matrix(a);
  const auto av = a.values();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double lse = row_lse(av.data() + i * n, n);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] - lse;
  }
  return make_op(a.shape(), std::move(out), {a.node()}, [m, n](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.value.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += gy[j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[j] - std::exp(y[j]) * gs;
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  auto [m, n] = as_matrix(a);
  const auto av = a.values();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double lse = row_lse(av.data() + i * n, n);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = std::exp(av[i * n + j] - lse);
  }
  return make_op(a.shape(), std::move(out), {a.node()}, [m, n](Node& self) {
    auto& ga = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.value.data() + i * n;
      const double* gy = self.grad.data() + i * n;
      const double yg = kernels::dot(y, gy, n);
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[j] * (gy[j] - yg);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets) {
  auto [m, n] = as_matrix(logits);
  require(targets.size() == m, "cross_entropy: one target per row required");
  require(m > 0, "cross_entropy: empty batch");
  const auto lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(m * n);
  std::vector<std::int64_t> t(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    require(t[i] >= 0 && static_cast<std::size_t>(t[i]) < n,
            "cross_entropy: target out of range");
    const double* row = lv.data() + i * n;
    const double lse = row_lse(row, n);
    total += lse - row[t[i]];
    for (std::size_t j = 0; j < n; ++j) (*probs)[i * n + j] = std::exp(row[j] - lse);
  }
  const double inv = 1.0 / static_cast<double>(m);
  return make_op({1}, {total * inv}, {logits.node()},
                 [probs, t = std::move(t), m, n, inv](Node& self) {
                   auto& g = self.inputs[0]->ensure_grad();
                   const double gs = self.grad[0] * inv;
                   for (std::size_t i = 0; i < m; ++i) {
                     for (std::size_t j = 0; j < n; ++j)
                       g[i * n + j] += gs * (*probs)[i * n + j];
                     g[i * n + t[i]] -= gs;
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  auto [m, d] = as_matrix(x);
  require(gamma.numel() == d && beta.numel() == d, "layer_norm: affine size mismatch");
  const auto xv = x.values();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(m);
  std::vector<double> out(x.numel());
  const auto gv = gamma.values();
  const auto bv = beta.values();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
                 [xhat, inv_std, m, d](Node& self) {
                   Node& xn = *self.inputs[0];
                   Node& gn = *self.inputs[1];
                   Node& bn = *self.inputs[2];
                   const auto& g = self.grad;
                   if (gn.requires_grad || bn.requires_grad) {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < d; ++j) {
                         if (gn.requires_grad) gn.ensure_grad()[j] += g[i * d + j] * (*xhat)[i * d + j];
                         if (bn.requires_grad) bn.ensure_grad()[j] += g[i * d + j];
                       }
                   }
                   if (!xn.requires_grad) return;
                   auto& gx = xn.ensure_grad();
                   std::vector<double> gh(d);
                   for (std::size_t i = 0; i < m; ++i) {
                     double mean_gh = 0.0, mean_ghx = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                       gh[j] = g[i * d + j] * gn.value[j];
                       mean_gh += gh[j];
                       mean_ghx += gh[j] * (*xhat)[i * d + j];
                     }
                     mean_gh /= static_cast<double>(d);
                     mean_ghx /= static_cast<double>(d);
                     for (std::size_t j = 0; j < d; ++j)
                       gx[i * d + j] += (*inv_std)[i] *
                                        (gh[j] - mean_gh - (*xhat)[i * d + j] * mean_ghx);
                   }
                 });
}

}  // namespace ops
}  // namespace sslkit
