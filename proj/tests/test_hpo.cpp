#include <doctest.h>

#include <cmath>
#include <fstream>

#include "sslkit/hpo.hpp"
#include "sslkit/trainer.hpp"
#include "support.hpp"

using namespace sslkit;

namespace {

double surrogate(double lr) { return std::pow(std::log(lr) - std::log(1e-3), 2); }

/// Reports the surrogate for `epochs` epochs, stopping when pruned.
Objective quadratic(std::int64_t epochs) {
  return [epochs](const TrialParams& p, const TrialReporter& report) {
    const double f = surrogate(p.learning_rate);
    for (std::int64_t e = 1; e <= epochs; ++e) {
      if (report(e, f + 1.0 / static_cast<double>(e))) break;
    }
    return f;
  };
}

Trial trial_with(std::size_t id, std::vector<std::pair<std::int64_t, double>> metrics) {
  Trial t;
  t.id = id;
  t.intermediate = std::move(metrics);
  return t;
}

}  // namespace

TEST_CASE("median rule compares against peers at the same epoch") {
  const std::vector<Trial> peers = {trial_with(0, {{1, 1.0}, {2, 1.0}}), trial_with(1, {{1, 3.0}, {2, 3.0}}),
                                    trial_with(2, {{1, 2.0}})};
  CHECK(should_prune(trial_with(9, {{2, 2.5}}), peers, 2));
  CHECK(!should_prune(trial_with(9, {{2, 2.0}}), peers, 2));  // equal to the median
  CHECK(!should_prune(trial_with(9, {{2, 1.5}}), peers, 2));
  CHECK(!should_prune(trial_with(9, {{3, 9.0}}), peers, 3));  // no peer reached epoch 3
  CHECK(!should_prune(trial_with(9, {{1, 9.0}}), peers, 1));  // warmup
  CHECK(should_prune(trial_with(9, {{1, 9.0}}), peers, 1, 0));
}

TEST_CASE("property: nothing is pruned at or before the warmup epoch") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::int64_t warmup = static_cast<std::int64_t>(rng.below(4));
    std::vector<Trial> peers;
    for (std::size_t i = 0; i < 8; ++i) {
      Trial t;
      t.id = i;
      for (std::int64_t e = 1; e <= 5; ++e) t.intermediate.emplace_back(e, rng.uniform(0.0, 1.0));
      peers.push_back(t);
    }
    Trial worst;
    worst.id = 100;
    for (std::int64_t e = 1; e <= 5; ++e) {
      worst.intermediate.emplace_back(e, 10.0);
      if (e <= warmup) CHECK(!should_prune(worst, peers, e, warmup));
      else CHECK(should_prune(worst, peers, e, warmup));
    }
  }
  SearchOptions so;
  so.n_trials = 10;
  so.warmup = 3;
  const SearchResult res = run_search(SearchSpace{}, quadratic(3), so);
  CHECK(res.n_pruned == 0);
  CHECK(res.n_complete == 10);
}

TEST_CASE("quadratic surrogate finds a learning rate near 1e-3") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SearchOptions so;
    so.n_trials = 30;
    so.seed = seed;
    const SearchResult res = run_search(SearchSpace{}, quadratic(3), so);
    CAPTURE(seed);
    CHECK(res.best_params.learning_rate > 1e-3 / 3.0);
    CHECK(res.best_params.learning_rate < 1e-3 * 3.0);
    CHECK(res.trials.size() == 30);
    CHECK(res.n_pruned + res.n_complete == 30);
    double best = 1e300;
    for (const auto& t : res.trials)
      if (t.final_metric) best = std::min(best, *t.final_metric);
    CHECK(surrogate(res.best_params.learning_rate) == best);
  }
}

TEST_CASE("a fixed seed reproduces the trial sequence") {
  SearchOptions so;
  so.n_trials = 20;
  so.seed = 11;
  const SearchResult a = run_search(SearchSpace{}, quadratic(5), so), b = run_search(SearchSpace{}, quadratic(5), so);
  CHECK(a.summary() == b.summary());
  so.seed = 12;
  CHECK(run_search(SearchSpace{}, quadratic(5), so).summary() != a.summary());
}

TEST_CASE("property: sampler marginals") {
  const SearchSpace space;
  Rng rng(5);
  const std::size_t n = 20000;
  double log_lr = 0.0;
  std::vector<std::size_t> counts(space.batch_sizes.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const TrialParams p = sample_params(space, rng);
    CHECK(p.learning_rate >= space.lr_min);
    CHECK(p.learning_rate <= space.lr_max);
    CHECK(p.weight_decay >= space.wd_min);
    CHECK(p.weight_decay <= space.wd_max);
    log_lr += std::log(p.learning_rate) / static_cast<double>(n);
    const auto it = std::find(space.batch_sizes.begin(), space.batch_sizes.end(), p.batch_size);
    REQUIRE(it != space.batch_sizes.end());
    ++counts[static_cast<std::size_t>(it - space.batch_sizes.begin())];
  }
  const double mid = 0.5 * (std::log(space.lr_min) + std::log(space.lr_max));
  CHECK(std::abs(log_lr - mid) < 0.05 * std::abs(mid));
  const double k = static_cast<double>(counts.size()), expect = static_cast<double>(n) / k;
  const double sigma = std::sqrt(static_cast<double>(n) * (1.0 / k) * (1.0 - 1.0 / k));
  for (auto c : counts) CHECK(std::abs(static_cast<double>(c) - expect) < 3.0 * sigma);
}

TEST_CASE("pruned trials stop early and are logged") {
  const auto dir = test::scratch_dir("hpo_log");
  SearchOptions so;
  so.n_trials = 12;
  so.seed = 2;
  so.log_path = dir / "trials.jsonl";
  so.summary_path = dir / "summary.json";
  const SearchResult res = run_search(SearchSpace{}, quadratic(5), so);
  CHECK(res.n_pruned > 0);
  std::size_t lines = 0;
  for (const auto& t : res.trials) {
    lines += t.intermediate.size();
    if (t.status == TrialStatus::kPruned) {
      CHECK(!t.final_metric);
      CHECK(t.intermediate.back().first > so.warmup);
    }
  }
  std::ifstream in(*so.log_path);
  std::string line;
  std::size_t seen = 0;
  while (std::getline(in, line)) ++seen;
  CHECK(seen == lines);
  std::ifstream s(*so.summary_path);
  CHECK(json::parse(s) == res.summary());
}

TEST_CASE("trials worse than every peer are pruned after the first") {
  SearchOptions so;
  so.n_trials = 4;
  so.warmup = 0;
  std::size_t calls = 0;
  std::vector<TrialParams> seen;
  Objective obj = [&](const TrialParams& p, const TrialReporter& report) {
    seen.push_back(p);
    const double m = 10.0 + static_cast<double>(calls++);
    report(1, m);
    return m;
  };
  const SearchResult res = run_search(SearchSpace{}, obj, so);
  CHECK(res.n_pruned == 3);
  CHECK(res.n_complete == 1);
  CHECK(!res.all_pruned);
  CHECK(res.trials.front().status == TrialStatus::kComplete);
  CHECK(res.best_params.learning_rate == seen.front().learning_rate);
}

TEST_CASE("search rejects bad spaces and non-monotone epochs") {
  SearchSpace bad;
  bad.lr_min = 0.0;
  SearchOptions so;
  so.n_trials = 1;
  CHECK_THROWS(run_search(bad, quadratic(1), so));
  Objective twice = [](const TrialParams&, const TrialReporter& report) {
    report(2, 1.0);
    report(1, 1.0);
    return 1.0;
  };
  CHECK_THROWS(run_search(SearchSpace{}, twice, so));
  so.n_trials = 0;
  CHECK_THROWS(run_search(SearchSpace{}, quadratic(1), so));
}

TEST_CASE("reference search settings are accepted by training configs") {
  const RunConfig cfg = validate_config(
      {{"method", "wav2vec2"}, {"use_hpo", true}, {"n_trials", 20}, {"tuning_epochs", 5}});
  CHECK(cfg.use_hpo);
  CHECK(cfg.n_trials == 20);
  CHECK(cfg.tuning_epochs == 5);
  CHECK_THROWS_AS(validate_config({{"method", "simclr"}, {"n_trials", 0}}), ValidationError);
}

TEST_CASE("run_hpo drives real tuning runs") {
  const auto dir = test::scratch_dir("hpo_run");
  const RunConfig cfg = validate_config({{"method", "simclr"},
                                         {"use_hpo", true},
                                         {"n_trials", 3},
                                         {"tuning_epochs", 2},
                                         {"seed", 1},
                                         {"method_params",
                                          {{"backbone_width", 8}, {"backbone_depth", 1}, {"embed_dim", 8}, {"proj_dim", 8}}}});
  const InMemoryDataset ds = make_shapes({16, 2, 16, 0.05, 1});
  const SearchResult a = run_hpo(cfg, ds, &ds, {}, dir);
  const SearchResult b = run_hpo(cfg, ds, &ds);
  CHECK(a.trials.size() == 3);
  CHECK(a.summary() == b.summary());
  CHECK(std::filesystem::exists(dir / "trials.jsonl"));
}
