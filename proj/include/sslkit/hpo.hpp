#pragma once

// Random search over learning rate, weight decay and batch size with
// median-rule pruning on per-epoch metrics (lower is better).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sslkit/config.hpp"
#include "sslkit/rng.hpp"

namespace sslkit {

struct SearchSpace {
  double lr_min = 1e-5;
  double lr_max = 1e-2;
  double wd_min = 1e-6;
  double wd_max = 1e-1;
  std::vector<std::int64_t> batch_sizes = {8, 16, 32, 64};
  void check() const;
};

struct TrialParams {
  double learning_rate = 0.0;
  double weight_decay = 0.0;
  std::int64_t batch_size = 0;
  json to_json() const;
};

enum class TrialStatus { kRunning, kPruned, kComplete };
std::string_view trial_status_name(TrialStatus s);

struct Trial {
  std::size_t id = 0;
  TrialParams params;
  std::vector<std::pair<std::int64_t, double>> intermediate;  // (epoch, metric)
  TrialStatus status = TrialStatus::kRunning;
  std::optional<double> final_metric;

  std::optional<double> metric_at(std::int64_t epoch) const;
  json to_json() const;
};

/// Log-uniform learning rate and weight decay, uniform batch size.
TrialParams sample_params(const SearchSpace& space, Rng& rng);

/// True iff epoch > warmup and the trial's metric at `epoch` is strictly
/// greater than the median of the peers' metrics at that epoch. Peers without
/// a value at `epoch` are ignored; no peers means no pruning.
bool should_prune(const Trial& trial, std::span<const Trial> peers, std::int64_t epoch,
                  std::int64_t warmup = 1);

/// Called by an objective after each epoch (1-based). Returns true when the
/// trial has been pruned and the objective should stop.
using TrialReporter = std::function<bool(std::int64_t epoch, double metric)>;
/// Runs one trial and returns its final metric.
using Objective = std::function<double(const TrialParams&, const TrialReporter&)>;

struct SearchOptions {
  std::size_t n_trials = 20;
  std::uint64_t seed = 0;
  std::int64_t warmup = 1;
  std::optional<std::filesystem::path> log_path;      // JSONL, one record per trial-epoch
  std::optional<std::filesystem::path> summary_path;  // JSON summary
};

struct SearchResult {
  TrialParams best_params;
  std::vector<Trial> trials;
  std::size_t n_pruned = 0;
  std::size_t n_complete = 0;
  /// Set when no trial completed; best_params then come from the best
  /// intermediate metric.
  bool all_pruned = false;
  json summary() const;
};

SearchResult run_search(const SearchSpace& space, const Objective& objective,
                        const SearchOptions& opt);

}  // namespace sslkit
