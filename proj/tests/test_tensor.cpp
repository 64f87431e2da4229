#include <doctest.h>

#include <cmath>

#include "sslkit/kernels.hpp"
#include "support.hpp"

using namespace sslkit;
using namespace sslkit::test;

namespace {

/// Checks d sum(w * op(x)) / dx against central differences, with a fixed
/// random weighting so every output entry matters.
void check_unary(const char* name, Shape s, const std::function<Tensor(const Tensor&)>& op,
                 std::uint64_t seed = 1, double scale = 1.0) {
  Tensor x = random_param(s, seed, scale);
  const Tensor probe = op(x);
  const Tensor w = Tensor::constant(random_array(probe.shape(), seed + 1000));
  auto f = [&] {
    NoGradGuard ng;
    return ops::sum(ops::mul(op(x), w)).item();
  };
  x.zero_grad();
  ops::sum(ops::mul(op(x), w)).backward();
  const auto fd = numeric_grad(x, f);
  INFO(name);
  CHECK(relative_error(x.grad(), fd) < 1e-6);
}

void check_binary(const char* name, Shape sa, Shape sb,
                  const std::function<Tensor(const Tensor&, const Tensor&)>& op, std::uint64_t seed = 3) {
  Tensor a = random_param(sa, seed), b = random_param(sb, seed + 1);
  if (std::string(name) == "div") {
    for (double& v : b.mutable_values()) v = 1.5 + std::abs(v);
  }
  const Tensor w = Tensor::constant(random_array(op(a, b).shape(), seed + 2));
  auto f = [&] {
    NoGradGuard ng;
    return ops::sum(ops::mul(op(a, b), w)).item();
  };
  ops::sum(ops::mul(op(a, b), w)).backward();
  INFO(name);
  CHECK(relative_error(a.grad(), numeric_grad(a, f)) < 1e-6);
  CHECK(relative_error(b.grad(), numeric_grad(b, f)) < 1e-6);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients match central differences") {
  check_unary("relu", {4, 5}, [](const Tensor& x) { return ops::relu(x); });
  check_unary("gelu", {4, 5}, [](const Tensor& x) { return ops::gelu(x); });
  check_unary("tanh", {4, 5}, [](const Tensor& x) { return ops::tanh(x); });
  check_unary("exp", {4, 5}, [](const Tensor& x) { return ops::exp(x); });
  check_unary("log", {3, 3}, [](const Tensor& x) { return ops::log(ops::add_scalar(ops::square(x), 0.5)); });
  check_unary("sqrt", {3, 3}, [](const Tensor& x) { return ops::sqrt(ops::add_scalar(ops::square(x), 0.5)); });
  check_unary("mean", {3, 4}, [](const Tensor& x) { return ops::mean(x); });
  check_unary("sum_cols", {3, 4}, [](const Tensor& x) { return ops::sum_cols(x); });
  check_unary("sum_rows", {3, 4}, [](const Tensor& x) { return ops::sum_rows(x); });
  check_unary("mean_rows", {3, 4}, [](const Tensor& x) { return ops::mean_rows(x); });
  check_unary("transpose", {3, 4}, [](const Tensor& x) { return ops::transpose(x); });
  check_unary("reshape", {3, 4}, [](const Tensor& x) { return ops::reshape(x, {2, 6}); });
  check_unary("neg", {3}, [](const Tensor& x) { return ops::neg(x); });
  check_unary("l2_normalize_rows", {3, 4}, [](const Tensor& x) { return ops::l2_normalize_rows(x); });
  check_unary("log_softmax_rows", {3, 4}, [](const Tensor& x) { return ops::log_softmax_rows(x); });
  check_unary("softmax_rows", {3, 4}, [](const Tensor& x) { return ops::softmax_rows(x); });
  check_unary("select_rows", {4, 3}, [](const Tensor& x) {
    const std::int64_t rows[] = {2, 0, 2};
    return ops::select_rows(x, rows);
  });
  check_unary("slice_rows", {5, 2}, [](const Tensor& x) { return ops::slice_rows(x, 1, 4); });
  check_unary("gather", {2, 3}, [](const Tensor& x) {
    static const IndexMap idx = std::make_shared<const std::vector<std::int64_t>>(
        std::vector<std::int64_t>{5, -1, 0, 0, 3});
    return ops::gather(x, idx, {5});
  });
  check_unary("scatter_add_rows", {3, 2}, [](const Tensor& x) {
    const std::int64_t src[] = {0, 1, 2, 2};
    const std::int64_t dst[] = {1, 1, 0, 3};
    const double wt[] = {0.5, 2.0, 1.0, -1.0};
    return ops::scatter_add_rows(x, src, dst, wt, 4);
  });
  check_unary("cross_entropy", {4, 3}, [](const Tensor& x) {
    const std::int64_t t[] = {0, 2, 1, 1};
    return ops::cross_entropy(x, t);
  });
  check_unary("concat", {2, 3}, [](const Tensor& x) {
    const Tensor rows[] = {x, ops::mul_scalar(x, 2.0)};
    const Tensor cols[] = {x, ops::square(x)};
    const Tensor both[] = {ops::reshape(ops::concat_rows(rows), {4, 3}),
                           ops::reshape(ops::concat_cols(cols), {4, 3})};
    return ops::concat_rows(both);
  });
}

TEST_CASE("binary and product gradients match central differences") {
  check_binary("add", {3, 4}, {3, 4}, [](auto& a, auto& b) { return ops::add(a, b); });
  check_binary("add broadcast", {2, 3, 4}, {4}, [](auto& a, auto& b) { return ops::add(a, b); });
  check_binary("sub broadcast", {3, 4}, {4}, [](auto& a, auto& b) { return ops::sub(a, b); });
  check_binary("mul", {3, 4}, {3, 4}, [](auto& a, auto& b) { return ops::mul(a, b); });
  check_binary("div", {3, 4}, {4}, [](auto& a, auto& b) { return ops::div(a, b); });
  check_binary("scale_by", {3, 4}, {1}, [](auto& a, auto& b) { return ops::scale_by(a, b); });
  check_binary("matmul", {3, 4}, {4, 5}, [](auto& a, auto& b) { return ops::matmul(a, b); });
  check_binary("matmul_nt", {3, 4}, {5, 4}, [](auto& a, auto& b) { return ops::matmul_nt(a, b); });
  check_binary("bmm", {2, 3, 4}, {2, 4, 2}, [](auto& a, auto& b) { return ops::bmm(a, b); });
  check_binary("bmm_nt", {2, 3, 4}, {2, 5, 4}, [](auto& a, auto& b) { return ops::bmm_nt(a, b); });
  check_binary("linear", {2, 3, 4}, {5, 4}, [](auto& x, auto& w) {
    return ops::linear(x, w, Tensor::constant(NdArray({5}, 0.25)));
  });
  check_binary("layer_norm", {3, 6}, {6}, [](auto& x, auto& g) {
    return ops::layer_norm(x, g, Tensor::constant(NdArray({6}, 0.1)));
  });
}

TEST_CASE("gradients accumulate across shared subgraphs") {
  Tensor x = Tensor::parameter(NdArray({2}, std::vector<double>{1.0, -2.0}));
  Tensor y = ops::sum(ops::add(ops::mul(x, x), x));  // x^2 + x
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(-3.0));
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("detach and constants receive no gradient") {
  Tensor x = random_param({3}, 1);
  Tensor c = Tensor::constant(random_array({3}, 2));
  ops::sum(ops::add(ops::mul(x.detach(), x), c)).backward();
  CHECK(!c.has_grad());
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(x.at(i)));
}

TEST_CASE("no-grad guard builds no graph") {
  Tensor x = random_param({3}, 1);
  Tensor y;
  {
    NoGradGuard ng;
    CHECK(!grad_enabled());
    y = ops::sum(ops::square(x));
  }
  CHECK(grad_enabled());
  CHECK(!y.requires_grad());
}

TEST_CASE("masked softmax ignores -inf entries") {
  const double inf = INFINITY;
  Tensor x = Tensor::constant({1, 3}, {0.0, -inf, std::log(3.0)});
  Tensor p = ops::softmax_rows(x);
  CHECK(p.at(0) == doctest::Approx(0.25));
  CHECK(p.at(1) == 0.0);
  CHECK(p.at(2) == doctest::Approx(0.75));
}

TEST_CASE("shape errors are reported") {
  Tensor a = random_param({2, 3}, 1), b = random_param({4, 5}, 2);
  CHECK_THROWS_AS(ops::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ops::add(a, b), ShapeError);
  CHECK_THROWS_AS(ops::reshape(a, {5}), ShapeError);
}

TEST_CASE("mixed precision rounds products to binary16") {
  Tensor a = Tensor::constant({1, 1}, {1.0 + 1e-4});
  Tensor b = Tensor::constant({1, 1}, {1.0});
  const double full = ops::matmul(a, b).item();
  double mixed;
  {
    PrecisionGuard pg(Precision::kMixed);
    CHECK(current_precision() == Precision::kMixed);
    mixed = ops::matmul(a, b).item();
  }
  CHECK(current_precision() == Precision::kFull);
  CHECK(full == doctest::Approx(1.0001));
  CHECK(mixed == 1.0);
}

TEST_CASE("matrix products agree under both kernel variants") {
  Tensor a = random_param({7, 9}, 1), b = random_param({9, 6}, 2);
  const kernels::Isa before = kernels::active_isa();
  kernels::set_isa(kernels::Isa::kScalar);
  const NdArray s = ops::matmul(a, b).array();
  kernels::set_isa(kernels::Isa::kAvx2);
  const NdArray v = ops::matmul(a, b).array();
  kernels::set_isa(before);
  for (std::size_t i = 0; i < s.numel(); ++i) CHECK(s.data[i] == doctest::Approx(v.data[i]).epsilon(1e-12));
}
