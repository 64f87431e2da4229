#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sslkit/config.hpp"
#include "sslkit/nn.hpp"

namespace sslkit {

struct UnknownOptimizer : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// First-order optimizer over a fixed list of named parameters.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<NamedTensor> params, double lr, double weight_decay);

  OptimizerKind kind() const { return kind_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  double weight_decay() const { return wd_; }
  std::size_t steps() const { return steps_; }

  /// Applies one update from the accumulated gradients. Parameters without a
  /// gradient are treated as having a zero gradient.
  void step();
  void zero_grad();

  /// Moment buffers keyed by "<param>.<slot>" plus the step count, for
  /// checkpoints.
  std::map<std::string, NdArray> state() const;
  void load_state(const std::map<std::string, NdArray>& s);

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  static constexpr double kMomentum = 0.9;

 private:
  OptimizerKind kind_;
  std::vector<NamedTensor> params_;
  double lr_, wd_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Parses an optimizer name; UnknownOptimizer for anything else.
OptimizerKind optimizer_kind(std::string_view name);

/// Trainable parameters of `m` in an Optimizer.
Optimizer build_optimizer(OptimizerKind kind, const Module& m, double lr, double weight_decay);

/// lr at `step` of `total` steps under a schedule name (constant | cosine).
double scheduled_lr(const std::string& schedule, double base_lr, std::size_t step,
                    std::size_t total);

}  // namespace sslkit
