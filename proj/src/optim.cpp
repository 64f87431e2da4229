#include "sslkit/optim.hpp"

#include <cmath>
#include <numbers>

namespace sslkit {

Optimizer::Optimizer(OptimizerKind kind, std::vector<NamedTensor> params, double lr,
                     double weight_decay)
    : kind_(kind), params_(std::move(params)), lr_(lr), wd_(weight_decay) {
  if (!(lr > 0)) throw std::invalid_argument("learning rate must be > 0");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be >= 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(kind_ == OptimizerKind::kSgd ? 0 : p.tensor.numel(), 0.0);
  }
}

void Optimizer::step() {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(kBeta1, t);
  const double bc2 = 1.0 - std::pow(kBeta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    auto w = p.mutable_values();
    const auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      double gj = g.empty() ? 0.0 : g[j];
      switch (kind_) {
        case OptimizerKind::kAdam:
          gj += wd_ * w[j];
          [[fallthrough]];
        case OptimizerKind::kAdamW: {
          if (kind_ == OptimizerKind::kAdamW) w[j] *= 1.0 - lr_ * wd_;
          m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * gj;
          v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * gj * gj;
          const double mhat = m[j] / bc1, vhat = v[j] / bc2;
          w[j] -= lr_ * mhat / (std::sqrt(vhat) + kEps);
          break;
        }
        case OptimizerKind::kSgd:
          gj += wd_ * w[j];
          m[j] = steps_ == 1 ? gj : kMomentum * m[j] + gj;
          w[j] -= lr_ * m[j];
          break;
      }
    }
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::map<std::string, NdArray> Optimizer::state() const {
  std::map<std::string, NdArray> s;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Shape& shape = params_[i].tensor.shape();
    s.emplace(params_[i].name + ".m", NdArray(shape, m_[i]));
    if (!v_[i].empty()) s.emplace(params_[i].name + ".v", NdArray(shape, v_[i]));
  }
  s.emplace("__steps__", NdArray({1}, static_cast<double>(steps_)));
  return s;
}

void Optimizer::load_state(const std::map<std::string, NdArray>& s) {
  auto fetch = [&](const std::string& key, std::vector<double>& dst) {
    auto it = s.find(key);
    if (it == s.end() || it->second.data.size() != dst.size()) {
      throw std::invalid_argument("optimizer state lacks a matching entry for '" + key + "'");
    }
    dst = it->second.data;
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    fetch(params_[i].name + ".m", m_[i]);
    if (!v_[i].empty()) fetch(params_[i].name + ".v", v_[i]);
  }
  auto it = s.find("__steps__");
  if (it == s.end() || it->second.data.size() != 1) {
    throw std::invalid_argument("optimizer state lacks a step count");
  }
  steps_ = static_cast<std::size_t>(it->second.data[0]);
}

OptimizerKind optimizer_kind(std::string_view name) {
  auto k = parse_optimizer(name);
  if (!k) throw UnknownOptimizer("unknown optimizer '" + std::string(name) + "'; expected one of adam, adamw, sgd");
  return *k;
}

Optimizer build_optimizer(OptimizerKind kind, const Module& m, double lr, double weight_decay) {
  std::vector<NamedTensor> params;
  for (auto& nt : m.named_parameters()) {
    if (nt.tensor.requires_grad()) params.push_back(nt);
  }
  return Optimizer(kind, std::move(params), lr, weight_decay);
}

double scheduled_lr(const std::string& schedule, double base_lr, std::size_t step,
                    std::size_t total) {
  if (schedule == "constant" || total == 0) return base_lr;
  if (schedule == "cosine") {
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
  }
  throw std::invalid_argument("unknown lr schedule '" + schedule + "'");
}

}  // namespace sslkit
