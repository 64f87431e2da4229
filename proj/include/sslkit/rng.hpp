#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>

namespace sslkit {

/// splitmix64 finalizer; a cheap bijective mixer for deriving seeds.
std::uint64_t mix64(std::uint64_t x);
/// Order-sensitive combination of seed components.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

/// Seeded generator whose full state round-trips through a string, so
/// checkpoints can restore it exactly. Distributions are implemented here
/// rather than with <random> adaptors to keep draws identical across
/// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

}  // namespace sslkit
