#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "sslkit/kernels.hpp"
#include "support.hpp"

using namespace sslkit;
namespace k = sslkit::kernels;

namespace {

std::vector<double> randv(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

bool close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::abs(a[i] - b[i]) > tol * std::max(1.0, std::abs(a[i]))) return false;
  return true;
}

// Textbook triple loop, independent of both kernel variants.
std::vector<double> naive_gemm(std::size_t m, std::size_t n, std::size_t kk, const std::vector<double>& a,
                               const std::vector<double>& b, bool ta, bool tb) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < kk; ++p) {
        const double x = ta ? a[p * m + i] : a[i * kk + p];
        const double y = tb ? b[j * kk + p] : b[p * n + j];
        s += x * y;
      }
      c[i * n + j] = s;
    }
  return c;
}

// binary16 decoded from its fields.
double decode_half(std::uint16_t h) {
  const int sign = h >> 15, exp = (h >> 10) & 0x1F, frac = h & 0x3FF;
  double v;
  if (exp == 0) v = std::ldexp(frac, -24);
  else if (exp == 31) v = frac ? NAN : INFINITY;
  else v = std::ldexp(1024 + frac, exp - 25);
  return sign ? -v : v;
}

}  // namespace

TEST_CASE("isa dispatch reports and pins the active variant") {
  const k::Isa before = k::active_isa();
  CHECK(k::set_isa(k::Isa::kScalar) == k::Isa::kScalar);
  CHECK(k::active_isa() == k::Isa::kScalar);
  const k::Isa got = k::set_isa(k::Isa::kAvx2);
  CHECK(got == k::detected_isa());
  CHECK(k::isa_name(k::Isa::kScalar) == "scalar");
  k::set_isa(before);
}

TEST_CASE("scalar kernels match naive loops") {
  for (std::size_t n : {0u, 1u, 3u, 7u, 16u, 33u}) {
    const auto a = randv(n, 1 + n), b = randv(n, 100 + n);
    double dot = 0, sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dot += a[i] * b[i];
      sum += a[i];
    }
    CHECK(k::scalar::dot(a.data(), b.data(), n) == doctest::Approx(dot).epsilon(1e-12));
    CHECK(k::scalar::sum(a.data(), n) == doctest::Approx(sum).epsilon(1e-12));
    auto y = b;
    k::scalar::axpy(0.5, a.data(), y.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y[i] == doctest::Approx(b[i] + 0.5 * a[i]));
  }
  const std::size_t m = 5, n = 7, kk = 9;
  const auto a = randv(m * kk, 3), b = randv(kk * n, 4), bt = randv(n * kk, 5), at = randv(kk * m, 6);
  std::vector<double> c(m * n);
  k::scalar::gemm_nn(m, n, kk, a.data(), b.data(), c.data(), false);
  CHECK(close(c, naive_gemm(m, n, kk, a, b, false, false), 1e-12));
  k::scalar::gemm_nt(m, n, kk, a.data(), bt.data(), c.data(), false);
  CHECK(close(c, naive_gemm(m, n, kk, a, bt, false, true), 1e-12));
  k::scalar::gemm_tn(m, n, kk, at.data(), b.data(), c.data(), false);
  CHECK(close(c, naive_gemm(m, n, kk, at, b, true, false), 1e-12));
}

TEST_CASE("avx2 kernels agree with the scalar reference") {
  if (k::detected_isa() != k::Isa::kAvx2) {
    MESSAGE("CPU lacks AVX2; equivalence test skipped");
    return;
  }
  for (std::size_t n : {0u, 1u, 2u, 3u, 4u, 5u, 8u, 15u, 31u, 64u, 129u}) {
    const auto a = randv(n, 10 + n), b = randv(n, 20 + n);
    CHECK(k::avx2::dot(a.data(), b.data(), n) ==
          doctest::Approx(k::scalar::dot(a.data(), b.data(), n)).epsilon(1e-12));
    CHECK(k::avx2::sum(a.data(), n) == doctest::Approx(k::scalar::sum(a.data(), n)).epsilon(1e-12));
    auto y1 = b, y2 = b;
    k::scalar::axpy(-1.25, a.data(), y1.data(), n);
    k::avx2::axpy(-1.25, a.data(), y2.data(), n);
    CHECK(close(y1, y2, 1e-14));
  }
  for (std::size_t m : {1u, 3u, 4u, 9u})
    for (std::size_t n : {1u, 4u, 5u, 13u})
      for (std::size_t kk : {1u, 2u, 7u, 17u}) {
        const auto a = randv(m * kk, m * 100 + kk), b = randv(kk * n, n * 7 + kk), c0 = randv(m * n, 99);
        const auto bt = randv(n * kk, 5 + n), at = randv(kk * m, 6 + m);
        for (bool acc : {false, true}) {
          auto c1 = c0, c2 = c0;
          k::scalar::gemm_nn(m, n, kk, a.data(), b.data(), c1.data(), acc);
          k::avx2::gemm_nn(m, n, kk, a.data(), b.data(), c2.data(), acc);
          CHECK(close(c1, c2, 1e-12));
          c1 = c0, c2 = c0;
          k::scalar::gemm_nt(m, n, kk, a.data(), bt.data(), c1.data(), acc);
          k::avx2::gemm_nt(m, n, kk, a.data(), bt.data(), c2.data(), acc);
          CHECK(close(c1, c2, 1e-12));
          c1 = c0, c2 = c0;
          k::scalar::gemm_tn(m, n, kk, at.data(), b.data(), c1.data(), acc);
          k::avx2::gemm_tn(m, n, kk, at.data(), b.data(), c2.data(), acc);
          CHECK(close(c1, c2, 1e-12));
        }
      }
}

TEST_CASE("half conversion is exact on every binary16 pattern") {
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    const double ref = decode_half(static_cast<std::uint16_t>(h));
    const float got = k::half_bits_to_float(static_cast<std::uint16_t>(h));
    if (std::isnan(ref)) {
      CHECK(std::isnan(got));
      continue;
    }
    REQUIRE(static_cast<double>(got) == ref);
    CHECK(k::float_to_half_bits(got) == h);
  }
}

TEST_CASE("round_to_half picks the nearest binary16, ties to even") {
  std::vector<double> finite;
  for (std::uint32_t h = 0; h < 0x7C00; ++h) finite.push_back(decode_half(static_cast<std::uint16_t>(h)));
  const double max_half = finite.back();
  auto nearest = [&](double x) {
    const double ax = std::abs(x);
    if (ax > max_half + std::ldexp(1.0, 4)) return std::copysign(INFINITY, x);
    auto it = std::lower_bound(finite.begin(), finite.end(), ax);
    if (it == finite.end()) return std::copysign(INFINITY, x);
    if (it == finite.begin() || *it == ax) return std::copysign(*it, x);
    const double hi = *it, lo = *(it - 1);
    const double pick = (ax - lo < hi - ax) ? lo
                        : (hi - ax < ax - lo) ? hi
                        : ((it - finite.begin()) % 2 == 0 ? hi : lo);
    return std::copysign(pick, x);
  };
  Rng rng(7);
  std::vector<double> xs;
  for (int i = 0; i < 20000; ++i) {
    const double mag = std::ldexp(rng.uniform(), static_cast<int>(rng.below(40)) - 26);
    xs.push_back(static_cast<float>(rng.bernoulli(0.5) ? mag : -mag));
  }
  // Exact midpoints between neighbouring halves.
  for (double base : {1.0, 2.0, 1024.0}) xs.push_back(base + std::ldexp(1.0, -11) * base);
  xs.push_back(1.0 + 3 * std::ldexp(1.0, -11));
  std::vector<double> want(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) want[i] = nearest(xs[i]);

  for (k::Isa isa : {k::Isa::kScalar, k::Isa::kAvx2}) {
    if (isa == k::Isa::kAvx2 && (k::detected_isa() != k::Isa::kAvx2 || !k::has_f16c())) continue;
    auto got = xs;
    if (isa == k::Isa::kScalar) k::scalar::round_to_half(got.data(), got.size());
    else k::avx2::round_to_half(got.data(), got.size());
    std::size_t bad = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) bad += got[i] != want[i];
    CHECK_MESSAGE(bad == 0, k::isa_name(isa));
  }
}

TEST_CASE("dispatched kernels follow set_isa") {
  const auto a = randv(37, 1), b = randv(37, 2);
  const k::Isa before = k::active_isa();
  k::set_isa(k::Isa::kScalar);
  const double s = k::dot(a.data(), b.data(), a.size());
  CHECK(s == k::scalar::dot(a.data(), b.data(), a.size()));
  k::set_isa(before);
}
