#include <doctest.h>

#include <algorithm>
#include <random>

#include "sslkit/hash.hpp"
#include "sslkit/methods.hpp"
#include "support.hpp"

using namespace sslkit;

namespace {

const json kReferenceConfig = {{"method", "wav2vec2"}, {"batch_size", 16},          {"epochs", 100},
                        {"learning_rate", 1e-4}, {"weight_decay", 1e-2},     {"optimizer", "adamw"},
                        {"use_hpo", true},       {"n_trials", 20},           {"tuning_epochs", 5},
                        {"checkpoint_interval", 10}, {"reload_checkpoint", false},
                        {"use_data_parallel", true}, {"mixed_precision", false},
                        {"save_dir", "./"},      {"embedding_logging", true},
                        {"eval_template",
                         {{"num_classes", 39}, {"batch_size", 64}, {"lr", 1e-3}, {"epochs", 10},
                          {"freeze_backbone", true}}}};

std::vector<std::string> error_paths(const ValidationError& e) {
  std::vector<std::string> out;
  for (const auto& f : e.errors()) out.push_back(f.path);
  return out;
}

bool has_path(const ValidationError& e, const std::string& p) {
  const auto v = error_paths(e);
  return std::find(v.begin(), v.end(), p) != v.end();
}

MethodSpec dummy_spec(const std::string& key) {
  MethodSpec s;
  s.key = key;
  s.modality = Modality::kAudio;
  s.schema.add_float("temperature", 0.1, 0.0, {}, true);
  return s;
}

}  // namespace

TEST_CASE("registry lookup and listing") {
  const Registry& r = Registry::global();
  CHECK(r.lookup("wav2vec2").modality == Modality::kAudio);
  CHECK(r.lookup("simclr").modality == Modality::kVision);
  CHECK(r.lookup("SimCLR").key == "simclr");
  const auto vision = r.list_methods(Modality::kVision);
  CHECK(std::find(vision.begin(), vision.end(), "mae") != vision.end());
  const auto all = r.list_methods();
  CHECK(all.size() == 9);
  CHECK(std::is_sorted(all.begin(), all.end()));
  try {
    r.lookup("dino");
    FAIL("expected UnknownMethod");
  } catch (const UnknownMethod& e) {
    CHECK(e.available() == all);
  }
}

TEST_CASE("registering an existing key is rejected, a new key is accepted") {
  Registry r;
  register_builtin_methods(r);
  CHECK_THROWS_AS(r.register_method(dummy_spec("wav2vec2")), DuplicateKey);
  CHECK_THROWS_AS(r.register_method(dummy_spec("WAV2VEC2")), DuplicateKey);
  r.register_method(dummy_spec("cola_like"));
  CHECK(r.lookup("cola_like").modality == Modality::kAudio);
  const auto audio = r.list_methods(Modality::kAudio);
  CHECK(std::find(audio.begin(), audio.end(), "cola_like") != audio.end());
  const RunConfig cfg = validate_config({{"method", "cola_like"}}, r);
  CHECK(cfg.method_params["temperature"] == 0.1);
}

TEST_CASE("every shipped schema accepts its own defaults") {
  const Registry& r = Registry::global();
  for (const auto& key : r.list_methods()) {
    INFO(key);
    CHECK(r.lookup(key).schema.self_check().empty());
    const RunConfig cfg = validate_config({{"method", key}});
    CHECK(cfg.method == key);
  }
  const json sections = section_schemas_json();
  CHECK(sections.contains("training"));
  CHECK(sections.contains("runtime"));
  CHECK(sections.contains("eval_template"));
}

TEST_CASE("reference config validates with every value kept") {
  const RunConfig cfg = validate_config(kReferenceConfig);
  CHECK(cfg.modality == Modality::kAudio);
  CHECK(cfg.batch_size == 16);
  CHECK(cfg.epochs == 100);
  CHECK(cfg.learning_rate == 1e-4);
  CHECK(cfg.weight_decay == 1e-2);
  CHECK(cfg.optimizer == OptimizerKind::kAdamW);
  CHECK(cfg.use_hpo);
  CHECK(cfg.n_trials == 20);
  CHECK(cfg.tuning_epochs == 5);
  CHECK(cfg.checkpoint_interval == 10);
  CHECK(cfg.backbone == "default");
  REQUIRE(cfg.eval_template);
  CHECK(cfg.eval_template->num_classes == 39);
  CHECK(cfg.eval_template->freeze_backbone);
}

TEST_CASE("validation reports every violation with its path") {
  try {
    validate_config({{"method", "simclr"},
                     {"optimizer", "rmsprop"},
                     {"batch_size", 0},
                     {"learning_rate", -1.0},
                     {"method_params", {{"temperature", 0.0}, {"bogus", 1}}},
                     {"typo_field", 3}});
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(has_path(e, "training.optimizer"));
    CHECK(has_path(e, "training.batch_size"));
    CHECK(has_path(e, "training.learning_rate"));
    CHECK(has_path(e, "method_params.temperature"));
    CHECK(has_path(e, "method_params.bogus"));
    CHECK(has_path(e, "typo_field"));
    CHECK(e.to_json()["errors"].size() == e.errors().size());
  }
  CHECK_THROWS_AS(validate_config({{"batch_size", 4}}), ValidationError);
  CHECK_THROWS_AS(validate_config({{"method", "dino"}}), ValidationError);
  CHECK_THROWS_AS(validate_config({{"method", "simclr"}, {"modality", "audio"}}), ValidationError);
  CHECK_THROWS_AS(validate_config(json::array()), ValidationError);
}

TEST_CASE("export round-trips byte for byte") {
  const RunConfig cfg = validate_config(kReferenceConfig);
  const std::string text = export_config(cfg);
  const RunConfig back = parse_config_text(text);
  CHECK(back == cfg);
  CHECK(export_config(back) == text);
  CHECK(text.back() == '\n');

  const RunConfig defaults = validate_config({{"method", "simclr"}});
  const json exported = json::parse(export_config(defaults));
  for (const auto& f : Registry::global().lookup("simclr").schema.fields()) {
    CHECK(exported["method_params"].contains(f.name));
  }
  for (const char* k : {"batch_size", "epochs", "learning_rate", "optimizer", "n_trials"})
    CHECK(exported["training"].contains(k));
  for (const char* k : {"n_shards", "seed", "save_dir", "checkpoint_interval"})
    CHECK(exported["runtime"].contains(k));
}

TEST_CASE("section order is fixed and keys are sorted inside sections") {
  const ordered_json j = config_to_json(validate_config(kReferenceConfig));
  std::vector<std::string> top;
  for (auto it = j.begin(); it != j.end(); ++it) top.push_back(it.key());
  const std::vector<std::string> want = {"modality", "method",  "backbone",     "method_params",
                                         "training", "runtime", "eval_template"};
  CHECK(top == want);
  for (const char* section : {"method_params", "training", "runtime", "eval_template"}) {
    std::vector<std::string> keys;
    for (auto it = j[section].begin(); it != j[section].end(); ++it) keys.push_back(it.key());
    CHECK(std::is_sorted(keys.begin(), keys.end()));
  }
}

TEST_CASE("property: key permutations never change the export") {
  // Flatten the config to (key, value) pairs, shuffle them and rebuild the
  // object in shuffled insertion order with an order-preserving JSON type.
  const std::string reference = export_config(validate_config(kReferenceConfig));
  std::vector<std::pair<std::string, json>> items;
  for (const auto& [k, v] : kReferenceConfig.items()) items.emplace_back(k, v);
  std::mt19937_64 gen(42);
  for (int trial = 0; trial < 100; ++trial) {
    std::shuffle(items.begin(), items.end(), gen);
    ordered_json permuted = ordered_json::object();
    for (const auto& [k, v] : items) permuted[k] = ordered_json::parse(v.dump());
    const std::string text = permuted.dump();
    CHECK(export_config(parse_config_text(text)) == reference);
  }
}

TEST_CASE("property: random valid configs round-trip") {
  Rng rng(5);
  const auto methods = Registry::global().list_methods();
  for (int trial = 0; trial < 100; ++trial) {
    json raw = {{"method", methods[rng.below(methods.size())]},
                {"batch_size", 2 + static_cast<int>(rng.below(100))},
                {"epochs", 1 + static_cast<int>(rng.below(50))},
                {"learning_rate", std::exp(rng.uniform(std::log(1e-6), std::log(1.0)))},
                {"weight_decay", rng.uniform(0.0, 0.1)},
                {"optimizer", std::vector<std::string>{"adam", "adamw", "sgd"}[rng.below(3)]},
                {"seed", static_cast<int>(rng.below(1000))},
                {"mixed_precision", rng.bernoulli(0.5)}};
    const RunConfig cfg = validate_config(raw);
    const std::string text = export_config(cfg);
    CHECK(export_config(parse_config_text(text)) == text);
  }
}

TEST_CASE("config hash is the digest of the canonical export minus reload flag") {
  RunConfig cfg = validate_config(kReferenceConfig);
  const std::string h = config_hash(cfg);
  CHECK(h.size() == 64);
  RunConfig reload = cfg;
  reload.reload_checkpoint = true;
  CHECK(config_hash(reload) == h);
  CHECK(sha256_hex(export_config(cfg)) == h);
  RunConfig other = cfg;
  other.learning_rate = 2e-4;
  CHECK(config_hash(other) != h);
}

TEST_CASE("floats use the shortest round-trip form") {
  RunConfig cfg = validate_config({{"method", "simclr"}, {"learning_rate", 0.1}, {"weight_decay", 1e-2}});
  const std::string text = export_config(cfg);
  CHECK(text.find("\"learning_rate\": 0.1") != std::string::npos);
  CHECK(text.find("\"weight_decay\": 0.01") != std::string::npos);
}

TEST_CASE("sha256 matches known digests") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
