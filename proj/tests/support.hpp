#pragma once

// Helpers shared by the unit tests: random tensors, finite differences and
// scratch directories.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sslkit/rng.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit::test {

inline NdArray random_array(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  NdArray a(std::move(s));
  for (double& v : a.data) v = scale * rng.normal();
  return a;
}

inline Tensor random_param(Shape s, std::uint64_t seed, double scale = 1.0) {
  return Tensor::parameter(random_array(std::move(s), seed, scale));
}

/// Central differences of f with respect to every entry of x.
inline std::vector<double> numeric_grad(Tensor& x, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> g(x.numel());
  auto v = x.mutable_values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = f();
    v[i] = keep - h;
    const double down = f();
    v[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), or the absolute norm when both are tiny.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max(std::sqrt(std::max(na, nb)), 1e-8);
  return std::sqrt(diff) / denom;
}

inline double max_abs(std::span<const double> a) {
  double m = 0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

/// Fresh directory under the test scratch root.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const char* root = std::getenv("SSLKIT_TEST_TMP");
  const auto dir = std::filesystem::path(root ? root : std::filesystem::temp_directory_path().string()) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace sslkit::test
