#include "sslkit/hpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace sslkit {

void SearchSpace::check() const {
  if (!(lr_min > 0 && lr_min <= lr_max)) throw std::invalid_argument("learning-rate bounds must be positive and ordered");
  if (!(wd_min > 0 && wd_min <= wd_max)) throw std::invalid_argument("weight-decay bounds must be positive and ordered");
  if (batch_sizes.empty()) throw std::invalid_argument("batch-size choices are empty");
  for (auto b : batch_sizes) {
    if (b < 1) throw std::invalid_argument("batch sizes must be >= 1");
  }
}

json TrialParams::to_json() const {
  return {{"learning_rate", learning_rate}, {"weight_decay", weight_decay}, {"batch_size", batch_size}};
}

std::string_view trial_status_name(TrialStatus s) {
  switch (s) {
    case TrialStatus::kRunning: return "running";
    case TrialStatus::kPruned: return "pruned";
    case TrialStatus::kComplete: return "complete";
  }
  return "?";
}

std::optional<double> Trial::metric_at(std::int64_t epoch) const {
  for (const auto& [e, m] : intermediate) {
    if (e == epoch) return m;
  }
  return std::nullopt;
}

json Trial::to_json() const {
  json inter = json::array();
  for (const auto& [e, m] : intermediate) inter.push_back({{"epoch", e}, {"metric", m}});
  json j = {{"id", id}, {"params", params.to_json()}, {"intermediate", inter},
            {"status", trial_status_name(status)}};
  j["final_metric"] = final_metric ? json(*final_metric) : json(nullptr);
  return j;
}

TrialParams sample_params(const SearchSpace& space, Rng& rng) {
  TrialParams p;
  p.learning_rate = std::exp(rng.uniform(std::log(space.lr_min), std::log(space.lr_max)));
  p.weight_decay = std::exp(rng.uniform(std::log(space.wd_min), std::log(space.wd_max)));
  p.batch_size = space.batch_sizes[rng.below(space.batch_sizes.size())];
  return p;
}

bool should_prune(const Trial& trial, std::span<const Trial> peers, std::int64_t epoch,
                  std::int64_t warmup) {
  if (epoch <= warmup) return false;
  const auto mine = trial.metric_at(epoch);
  if (!mine) return false;
  std::vector<double> vals;
  for (const auto& p : peers) {
    if (p.id == trial.id) continue;
    if (auto v = p.metric_at(epoch)) vals.push_back(*v);
  }
  if (vals.empty()) return false;
  std::sort(vals.begin(), vals.end());
  const std::size_t n = vals.size();
  const double median = n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
  return *mine > median;
}

json SearchResult::summary() const {
  json trials_json = json::array();
  for (const auto& t : trials) trials_json.push_back(t.to_json());
  return {{"best_params", best_params.to_json()},
          {"n_pruned", n_pruned},
          {"n_complete", n_complete},
          {"all_pruned", all_pruned},
          {"trials", trials_json}};
}

SearchResult run_search(const SearchSpace& space, const Objective& objective,
                        const SearchOptions& opt) {
  space.check();
  if (opt.n_trials < 1) throw std::invalid_argument("n_trials must be >= 1");
  Rng rng(derive_seed({opt.seed, 0x4B0}));
  SearchResult res;
  std::ofstream log;
  if (opt.log_path) {
    if (opt.log_path->has_parent_path()) std::filesystem::create_directories(opt.log_path->parent_path());
    log.open(*opt.log_path, std::ios::trunc);
  }
  for (std::size_t t = 0; t < opt.n_trials; ++t) {
    Trial trial;
    trial.id = t;
    trial.params = sample_params(space, rng);
    auto report = [&](std::int64_t epoch, double metric) {
      if (trial.status != TrialStatus::kRunning) return true;
      if (!trial.intermediate.empty() && epoch <= trial.intermediate.back().first) {
        throw std::invalid_argument("trial epochs must strictly increase");
      }
      trial.intermediate.emplace_back(epoch, metric);
      const bool prune = should_prune(trial, res.trials, epoch, opt.warmup);
      if (prune) trial.status = TrialStatus::kPruned;
      if (log.is_open()) {
        log << json{{"trial", trial.id}, {"epoch", epoch}, {"metric", metric},
                    {"params", trial.params.to_json()},
                    {"status", trial_status_name(prune ? TrialStatus::kPruned : TrialStatus::kRunning)}}
                   .dump()
            << '\n';
        log.flush();
      }
      return prune;
    };
    const double final_metric = objective(trial.params, report);
    if (trial.status == TrialStatus::kRunning) {
      trial.status = TrialStatus::kComplete;
      trial.final_metric = final_metric;
      ++res.n_complete;
    } else {
      ++res.n_pruned;
    }
    res.trials.push_back(std::move(trial));
  }
  double best = std::numeric_limits<double>::infinity();
  for (const auto& t : res.trials) {
    if (t.final_metric && *t.final_metric < best) {
      best = *t.final_metric;
      res.best_params = t.params;
    }
  }
  if (res.n_complete == 0) {
    res.all_pruned = true;
    for (const auto& t : res.trials) {
      for (const auto& [e, m] : t.intermediate) {
        if (m < best) {
          best = m;
          res.best_params = t.params;
        }
      }
    }
  }
  if (opt.summary_path) {
    std::ofstream f(*opt.summary_path, std::ios::trunc);
    f << res.summary().dump(2) << '\n';
  }
  return res;
}

}  // namespace sslkit
