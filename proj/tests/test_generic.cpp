#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>

#include "sslkit/generic.hpp"
#include "sslkit/trainer.hpp"
#include "support.hpp"

using namespace sslkit;

namespace {

constexpr std::size_t kDim = 16;

/// Two attention layers and an untargeted output head.
class AttnModel : public Module {
 public:
  explicit AttnModel(std::uint64_t seed) {
    Rng rng(seed);
    l0 = add_module("layer0", std::make_unique<MultiHeadAttention>(kDim, 4, rng));
    l1 = add_module("layer1", std::make_unique<MultiHeadAttention>(kDim, 4, rng));
    head = add_module("head", std::make_unique<Linear>(kDim, 3, rng));
  }
  Tensor forward(const Tensor& x) {
    Tensor h = ops::add(x, l0->forward(x, nullptr));
    h = ops::add(h, l1->forward(h, nullptr));
    return head->forward(ops::reshape(h, {h.dim(0) * h.dim(1), kDim}));
  }
  MultiHeadAttention* l0;
  MultiHeadAttention* l1;
  Linear* head;
};

ModelForward attn_forward() {
  return [](Module& m, const Fields& b) {
    return Fields{{"out", static_cast<AttnModel&>(m).forward(b.at("x"))}};
  };
}

LossFn mse(std::string pred, std::string target) {
  return {{pred, target}, [](std::span<const Tensor> a) { return ops::mean(ops::square(ops::sub(a[0], a[1]))); }};
}

std::vector<std::vector<double>> base_snapshot(const Module& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.named_parameters())
    if (p.name.find("lora_") == std::string::npos)
      out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

class Regression : public Module {
 public:
  Regression() {
    Rng rng(3);
    fc = add_module("fc", std::make_unique<Linear>(3, 1, rng));
  }
  Linear* fc;
};

}  // namespace

TEST_CASE("zero-initialised adapters leave outputs unchanged") {
  AttnModel model(1);
  std::vector<NdArray> before;
  for (std::uint64_t s = 0; s < 100; ++s)
    before.push_back(model.forward(Tensor::constant(test::random_array({2, 5, kDim}, s))).array());
  const AdapterReport rep = inject_lora(model, AdapterConfig{});
  CHECK(rep.matched.size() == 6);
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const NdArray after = model.forward(Tensor::constant(test::random_array({2, 5, kDim}, s))).array();
    for (std::size_t i = 0; i < after.data.size(); ++i) worst = std::max(worst, std::abs(after.data[i] - before[s].data[i]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("trainable parameters are exactly the adapter factors") {
  for (std::size_t r : {1u, 4u, 8u}) {
    AttnModel model(2);
    AdapterConfig cfg;
    cfg.r = r;
    const AdapterReport rep = inject_lora(model, cfg);
    std::size_t expect = 0;
    for (const auto& name : rep.matched) {
      CHECK((name.find("query") != std::string::npos || name.find("key") != std::string::npos ||
             name.find("value") != std::string::npos));
      expect += r * (kDim + kDim);
    }
    CHECK(rep.added_params == expect);
    CHECK(rep.trainable_params == expect);
    CHECK(model.parameter_count(true) == expect);
    CHECK(rep.total_params == model.parameter_count(false));
    CHECK(rep.trainable_fraction == doctest::Approx(static_cast<double>(expect) / static_cast<double>(rep.total_params)));
  }
  AttnModel model(2);
  AdapterConfig all;
  all.bias = "all";
  const AdapterReport rep = inject_lora(model, all);
  // biases of the four attention linears per layer and of the head
  CHECK(rep.trainable_params == rep.added_params + 2 * 4 * kDim + 3);
}

TEST_CASE("frozen base weights are bit-identical after adapter training") {
  AttnModel model(3);
  std::vector<Fields> batches;
  for (std::uint64_t s = 0; s < 2; ++s)
    batches.push_back({{"x", Tensor::constant(test::random_array({2, 4, kDim}, s))},
                       {"y", Tensor::constant(test::random_array({8, 3}, 50 + s))}});
  GenericConfig cfg = GenericConfig::from_json({{"epochs", 25}, {"use_lora", true}, {"lr", 1e-2}});
  GenericTrainer tr(model, attn_forward(), mse("out", "y"), {"out"}, batches, cfg);
  const auto base = base_snapshot(model);
  std::vector<std::vector<double>> adapters_before;
  for (const auto& p : model.named_parameters())
    if (p.tensor.requires_grad()) adapters_before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  const FitReport rep = tr.fit();
  CHECK(rep.steps == 50);
  CHECK(base_snapshot(model) == base);
  std::vector<std::vector<double>> adapters_after;
  for (const auto& p : model.named_parameters())
    if (p.tensor.requires_grad()) adapters_after.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  CHECK(adapters_after != adapters_before);
  CHECK(rep.epoch_losses.back() < rep.epoch_losses.front());
}

TEST_CASE("reference adapter settings are accepted") {
  const GenericConfig cfg = GenericConfig::from_json({{"r", 8},
                                                      {"lora_alpha", 32},
                                                      {"target_modules", {"query", "key", "value"}},
                                                      {"lora_dropout", 0.1},
                                                      {"bias", "none"},
                                                      {"task_type", "FEATURE_EXTRACTION"},
                                                      {"epochs", 10},
                                                      {"use_lora", true}});
  CHECK(cfg.lora.r == 8);
  CHECK(cfg.lora.alpha == 32.0);
  CHECK(cfg.lora.target_modules == std::vector<std::string>{"query", "key", "value"});
  CHECK(cfg.lora.dropout == 0.1);
  CHECK(cfg.lora.bias == "none");
  CHECK(cfg.lora.task_type == "FEATURE_EXTRACTION");
  CHECK(cfg.epochs == 10);
  const AdapterConfig defaults;
  CHECK(defaults.r == 8);
  CHECK(defaults.alpha == 32.0);
  CHECK(defaults.dropout == 0.1);
  CHECK(defaults.bias == "none");
  CHECK(GenericConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
  CHECK_THROWS(GenericConfig::from_json({{"rank", 8}}));
  CHECK_THROWS(GenericConfig::from_json({{"bias", "some"}}));
  CHECK_THROWS(GenericConfig::from_json({{"lora_dropout", 1.0}}));
  CHECK_THROWS(GenericConfig::from_json({{"r", 0}}));
}

TEST_CASE("adapter injection errors") {
  AttnModel model(4);
  AdapterConfig none;
  none.target_modules = {"conv"};
  CHECK_THROWS_AS(inject_lora(model, none), NoTargetsMatched);
  AdapterConfig big;
  big.r = 17;
  CHECK_THROWS_AS(inject_lora(model, big), RankTooLarge);
  inject_lora(model, AdapterConfig{});
  CHECK_THROWS(inject_lora(model, AdapterConfig{}));
}

TEST_CASE("loss parameters bind by name with model outputs winning") {
  const LossBinding b = bind_loss(mse("pred", "labels"), {"pred", "labels"}, {"labels", "x"});
  CHECK(b.collisions == std::vector<std::string>{"labels"});
  CHECK(b.plan[0].second == FieldSource::kModelOutput);
  CHECK(b.plan[1].second == FieldSource::kModelOutput);
  const Fields out = {{"pred", Tensor::constant({2}, {1, 2})}, {"labels", Tensor::constant({2}, {1, 2})}};
  const Fields batch = {{"labels", Tensor::constant({2}, {5, 5})}};
  CHECK(b.evaluate(out, batch).item() == 0.0);
  CHECK_THROWS_AS(b.evaluate({{"pred", out.at("pred")}}, batch), MissingField);
  CHECK_THROWS_AS(bind_loss(mse("pred", "target"), {"pred"}, {"x"}), UnboundParameter);

  Regression model;
  std::vector<Fields> batches = {{{"x", Tensor::constant(test::random_array({4, 3}, 1))},
                                  {"labels", Tensor::constant(test::random_array({4, 1}, 2))}}};
  GenericConfig cfg;
  cfg.epochs = 1;
  cfg.run_dir = test::scratch_dir("generic_collision");
  GenericTrainer tr(
      model,
      [](Module& m, const Fields& f) {
        Tensor p = static_cast<Regression&>(m).fc->forward(f.at("x"));
        return Fields{{"pred", p}, {"labels", p}};
      },
      mse("pred", "labels"), {"pred", "labels"}, batches, cfg);
  std::size_t warnings = 0;
  tr.add_listener([&](const ordered_json& e) { warnings += e["kind"] == "warning"; });
  const FitReport rep = tr.fit();
  CHECK(warnings == 1);
  CHECK(rep.epoch_losses.front() == 0.0);

  std::vector<Fields> missing = {batches[0], {{"x", batches[0].at("x")}}};
  GenericTrainer bad(
      model, [](Module& m, const Fields& f) { return Fields{{"pred", static_cast<Regression&>(m).fc->forward(f.at("x"))}}; },
      mse("pred", "labels"), {"pred"}, missing, GenericConfig{});
  CHECK_THROWS_AS(bad.fit(), MissingField);
}

TEST_CASE("generic training reaches the least-squares optimum") {
  const std::size_t n = 64;
  const NdArray x = test::random_array({n, 3}, 7);
  const NdArray noise = test::random_array({n, 1}, 8, 0.1);
  NdArray y({n, 1});
  for (std::size_t i = 0; i < n; ++i)
    y.data[i] = 1.5 * x.data[i * 3] - 2.0 * x.data[i * 3 + 1] + 0.5 * x.data[i * 3 + 2] + 0.3 + noise.data[i];

  Eigen::MatrixXd a(n, 4);
  Eigen::VectorXd b(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 3; ++j) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x.data[i * 3 + j];
    a(static_cast<Eigen::Index>(i), 3) = 1.0;
    b(static_cast<Eigen::Index>(i)) = y.data[i];
  }
  const Eigen::VectorXd w = (a.transpose() * a).ldlt().solve(a.transpose() * b);

  Regression model;
  GenericConfig cfg = GenericConfig::from_json({{"epochs", 3000}, {"optimizer", "adam"}, {"lr", 1e-2}});
  GenericTrainer tr(
      model, [](Module& m, const Fields& f) { return Fields{{"pred", static_cast<Regression&>(m).fc->forward(f.at("x"))}}; },
      mse("pred", "y"), {"pred"}, {{{"x", Tensor::constant(x)}, {"y", Tensor::constant(y)}}}, cfg);
  tr.fit();
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(model.fc->weight().at(j) - w(static_cast<Eigen::Index>(j))) < 1e-3);
  CHECK(std::abs(model.fc->bias().at(0) - w(3)) < 1e-3);
}

TEST_CASE("weights reload for continued training") {
  const auto dir = test::scratch_dir("generic_weights");
  AttnModel src(5), dst(6);
  save_weights(src, dir / "w.bin");
  const LoadReport rep = continue_from_weights(dst, dir / "w.bin");
  CHECK(rep.missing.empty());
  CHECK(rep.unexpected.empty());
  const auto a = src.named_state(), b = dst.named_state();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor.array() == b[i].tensor.array());

  std::map<std::string, NdArray> partial;
  for (const auto& nt : src.named_state())
    if (nt.name.rfind("layer0", 0) == 0) partial["model/" + nt.name] = nt.tensor.array();
  partial["extra"] = NdArray({1}, 0.0);
  AttnModel fresh(7);
  CHECK_THROWS_AS(continue_from_weights(fresh, partial, true), IncompleteWeights);
  const LoadReport loose = continue_from_weights(fresh, partial, false);
  CHECK(loose.unexpected == std::vector<std::string>{"extra"});
  CHECK(!loose.missing.empty());

  std::map<std::string, NdArray> wrong;
  for (const auto& nt : src.named_state()) wrong["model/" + nt.name] = nt.tensor.array();
  const auto first = src.named_state().front().name, last = src.named_state().back().name;
  wrong["model/" + first] = NdArray({1, 1}, 0.0);
  wrong["model/" + last] = NdArray({2}, 0.0);
  AttnModel victim(8);
  const auto before = victim.named_state().front().tensor.array();
  try {
    continue_from_weights(victim, wrong, false);
    FAIL("expected ShapeMismatch");
  } catch (const ShapeMismatch& e) {
    CHECK(e.offenders().size() == 2);
  }
  CHECK(victim.named_state().front().tensor.array() == before);
}
