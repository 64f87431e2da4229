#include "sslkit/generic.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "sslkit/optim.hpp"
#include "sslkit/trainer.hpp"

namespace sslkit {

namespace fs = std::filesystem;

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s;
}

}  // namespace

ShapeMismatch::ShapeMismatch(std::vector<std::string> offenders)
    : std::invalid_argument(fmt::format("{} tensor(s) with incompatible shapes: {}",
                                        offenders.size(), join(offenders))),
      offenders_(std::move(offenders)) {}

// ---------------------------------------------------------------------------
// Loss binding

LossBinding bind_loss(LossFn loss, const std::vector<std::string>& model_outputs,
                      const std::vector<std::string>& batch_fields) {
  if (!loss.fn) throw std::invalid_argument("loss callable is empty");
  LossBinding b;
  auto has = [](const std::vector<std::string>& v, const std::string& n) {
    return std::find(v.begin(), v.end(), n) != v.end();
  };
  for (const auto& name : loss.params) {
    const bool in_model = has(model_outputs, name), in_batch = has(batch_fields, name);
    if (!in_model && !in_batch)
      throw UnboundParameter(fmt::format("loss parameter '{}' is neither a model output [{}] "
                                         "nor a batch field [{}]",
                                         name, join(model_outputs), join(batch_fields)));
    if (in_model && in_batch) b.collisions.push_back(name);
    b.plan.emplace_back(name, in_model ? FieldSource::kModelOutput : FieldSource::kBatchField);
  }
  b.loss = std::move(loss);
  return b;
}

Tensor LossBinding::evaluate(const Fields& outputs, const Fields& batch) const {
  std::vector<Tensor> args;
  args.reserve(plan.size());
  for (const auto& [name, src] : plan) {
    const Fields& f = src == FieldSource::kModelOutput ? outputs : batch;
    const auto it = f.find(name);
    if (it == f.end())
      throw MissingField(fmt::format("{} lacks field '{}' bound to the loss",
                                     src == FieldSource::kModelOutput ? "model output" : "batch",
                                     name));
    args.push_back(it->second);
  }
  return loss.fn(args);
}

json LossBinding::to_json() const {
  json p = json::array();
  for (const auto& [name, src] : plan)
    p.push_back({{"param", name},
                 {"source", src == FieldSource::kModelOutput ? "model_output" : "batch_field"}});
  return {{"plan", p}, {"collisions", collisions}};
}

// ---------------------------------------------------------------------------
// Adapters

void AdapterConfig::check() const {
  if (r == 0) throw std::invalid_argument("lora rank r must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("lora_dropout must be in [0, 1)");
  if (!std::isfinite(alpha)) throw std::invalid_argument("lora_alpha must be finite");
  if (target_modules.empty()) throw std::invalid_argument("target_modules is empty");
  if (bias != "none" && bias != "all" && bias != "lora_only")
    throw std::invalid_argument("bias must be one of none, all, lora_only");
}

json AdapterConfig::to_json() const {
  return {{"r", r},           {"lora_alpha", alpha}, {"lora_dropout", dropout},
          {"target_modules", target_modules}, {"bias", bias},   {"task_type", task_type}};
}

json AdapterReport::to_json() const {
  return {{"matched", matched},
          {"added_params", added_params},
          {"trainable_params", trainable_params},
          {"total_params", total_params},
          {"trainable_fraction", trainable_fraction},
          {"task_type", task_type}};
}

AdapterReport inject_lora(Module& model, const AdapterConfig& cfg) {
  cfg.check();
  std::vector<std::pair<std::string, Linear*>> targets;
  for (auto& [name, m] : model.named_modules()) {
    auto* lin = dynamic_cast<Linear*>(m);
    if (!lin) continue;
    const bool hit = std::any_of(cfg.target_modules.begin(), cfg.target_modules.end(),
                                 [&](const std::string& p) { return name.find(p) != std::string::npos; });
    if (hit) targets.emplace_back(name, lin);
  }
  if (targets.empty())
    throw NoTargetsMatched("no linear module matches any of [" + join(cfg.target_modules) + "]");
  std::vector<std::string> too_small;
  for (const auto& [name, lin] : targets)
    if (cfg.r > std::min(lin->in_features(), lin->out_features()))
      too_small.push_back(fmt::format("{} ({}x{})", name, lin->out_features(), lin->in_features()));
  if (!too_small.empty())
    throw RankTooLarge(fmt::format("rank {} exceeds min(d_in, d_out) of {}", cfg.r, join(too_small)));

  freeze_parameters(model);
  AdapterReport rep;
  rep.task_type = cfg.task_type;
  Rng init(derive_seed({cfg.seed, 0x10AA}));
  std::uint64_t k = 0;
  for (const auto& [name, lin] : targets) {
    if (lin->adapter()) throw std::logic_error("module '" + name + "' already has an adapter");
    lin->attach_adapter(cfg.r, cfg.alpha, cfg.dropout, init, derive_seed({cfg.seed, 0xD50, k++}));
    rep.matched.push_back(name);
    rep.added_params += cfg.r * (lin->in_features() + lin->out_features());
    if (cfg.bias == "lora_only" && lin->bias().defined()) lin->bias().set_requires_grad(true);
  }
  if (cfg.bias == "all") {
    for (auto& nt : model.named_parameters()) {
      const auto dot = nt.name.rfind('.');
      const std::string leaf = dot == std::string::npos ? nt.name : nt.name.substr(dot + 1);
      if (leaf == "bias") nt.tensor.set_requires_grad(true);
    }
  }
  rep.trainable_params = model.parameter_count(true);
  rep.total_params = model.parameter_count(false);
  rep.trainable_fraction =
      rep.total_params ? static_cast<double>(rep.trainable_params) / static_cast<double>(rep.total_params) : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Weights

json LoadReport::to_json() const {
  return {{"loaded", loaded}, {"missing", missing}, {"unexpected", unexpected}};
}

void save_weights(const Module& model, const fs::path& path) {
  CheckpointData c;
  c.meta = {{"kind", "weights"}};
  for (const auto& nt : model.named_state()) c.arrays["model/" + nt.name] = nt.tensor.array();
  save_checkpoint(path, c);
}

LoadReport continue_from_weights(Module& model, const std::map<std::string, NdArray>& weights,
                                 bool strict, const std::string& prefix) {
  std::map<std::string, const NdArray*> src;
  for (const auto& [k, v] : weights) {
    if (k.rfind("optim/", 0) == 0) continue;
    src[k.rfind("model/", 0) == 0 ? k.substr(6) : k] = &v;
  }
  LoadReport rep;
  std::vector<std::string> offenders;
  std::set<std::string> used;
  auto state = model.named_state();
  for (const auto& nt : state) {
    const auto it = src.find(prefix + nt.name);
    if (it == src.end()) {
      rep.missing.push_back(nt.name);
      continue;
    }
    used.insert(it->first);
    if (it->second->shape != nt.tensor.shape())
      offenders.push_back(fmt::format("{}: expected {}, got {}", nt.name, shape_str(nt.tensor.shape()),
                                      shape_str(it->second->shape)));
  }
  for (const auto& [k, v] : src)
    if (!used.count(k)) rep.unexpected.push_back(k);
  if (!offenders.empty()) throw ShapeMismatch(std::move(offenders));
  if (strict && (!rep.missing.empty() || !rep.unexpected.empty()))
    throw IncompleteWeights(fmt::format("strict load: missing [{}], unexpected [{}]",
                                        join(rep.missing), join(rep.unexpected)));
  for (auto& nt : state) {
    const auto it = src.find(prefix + nt.name);
    if (it == src.end()) continue;
    std::copy(it->second->data.begin(), it->second->data.end(), nt.tensor.mutable_values().begin());
    rep.loaded.push_back(nt.name);
  }
  return rep;
}

LoadReport continue_from_weights(Module& model, const fs::path& source, bool strict,
                                 const std::string& prefix) {
  return continue_from_weights(model, load_checkpoint(source).arrays, strict, prefix);
}

// ---------------------------------------------------------------------------
// Trainer

GenericConfig GenericConfig::from_json(const json& j) {
  static const std::set<std::string> kKeys = {
      "epochs", "optimizer", "lr", "weight_decay", "use_lora", "r", "lora_alpha",
      "target_modules", "lora_dropout", "bias", "task_type", "checkpoint_interval", "run_id"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!kKeys.count(it.key())) throw std::invalid_argument("unknown generic trainer key '" + it.key() + "'");
  GenericConfig c;
  c.epochs = j.value("epochs", c.epochs);
  if (c.epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (j.contains("optimizer")) c.optimizer = optimizer_kind(j.at("optimizer").get<std::string>());
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.use_lora = j.value("use_lora", c.use_lora);
  c.lora.r = j.value("r", c.lora.r);
  c.lora.alpha = j.value("lora_alpha", c.lora.alpha);
  c.lora.target_modules = j.value("target_modules", c.lora.target_modules);
  c.lora.dropout = j.value("lora_dropout", c.lora.dropout);
  c.lora.bias = j.value("bias", c.lora.bias);
  c.lora.task_type = j.value("task_type", c.lora.task_type);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.run_id = j.value("run_id", c.run_id);
  c.lora.check();
  return c;
}

json GenericConfig::to_json() const {
  json j = {{"epochs", epochs},   {"optimizer", optimizer_name(optimizer)},
            {"lr", lr},           {"weight_decay", weight_decay},
            {"use_lora", use_lora}};
  const json adapter = lora.to_json();
  for (const auto& [k, v] : adapter.items()) j[k] = v;
  return j;
}

json FitReport::to_json() const {
  json j = {{"epoch_losses", epoch_losses}, {"steps", steps}, {"binding", binding},
            {"checkpoints", checkpoints}};
  if (adapter) j["adapter"] = adapter->to_json();
  return j;
}

GenericTrainer::GenericTrainer(Module& model, ModelForward forward, LossFn loss,
                               std::vector<std::string> model_outputs, std::vector<Fields> batches,
                               GenericConfig cfg)
    : model_(model), forward_(std::move(forward)), batches_(std::move(batches)), cfg_(std::move(cfg)) {
  if (batches_.empty()) throw DatasetEmpty("generic trainer needs at least one batch");
  if (cfg_.epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  std::vector<std::string> batch_fields;
  for (const auto& [k, v] : batches_.front()) batch_fields.push_back(k);
  binding_ = bind_loss(std::move(loss), model_outputs, batch_fields);
  if (cfg_.use_lora) adapter_ = inject_lora(model_, cfg_.lora);
}

FitReport GenericTrainer::fit() {
  const TrackerMode mode = cfg_.run_dir ? cfg_.tracker_mode : TrackerMode::kOff;
  const fs::path dir = cfg_.run_dir.value_or(fs::path());
  if (cfg_.run_dir) fs::create_directories(dir);
  Tracker tracker(dir, cfg_.run_id, mode);
  for (const auto& l : listeners_) tracker.add_listener(l);

  FitReport rep;
  rep.binding = binding_.to_json();
  rep.adapter = adapter_;
  ordered_json cfg_event = ordered_json::parse(cfg_.to_json().dump());
  cfg_event["binding"] = ordered_json::parse(rep.binding.dump());
  tracker.log_event("config", cfg_event);
  for (const auto& name : binding_.collisions)
    tracker.log_event("warning",
                      {{"message", "loss parameter '" + name + "' bound to the model output; "
                                   "the batch field of the same name is ignored"},
                       {"source", "binding"}});

  // Loader boundary: every batch must carry the bound batch fields.
  for (std::size_t i = 0; i < batches_.size(); ++i)
    for (const auto& [name, src] : binding_.plan)
      if (src == FieldSource::kBatchField && !batches_[i].count(name))
        throw MissingField(fmt::format("batch {} lacks field '{}' bound to the loss", i, name));

  Optimizer opt = build_optimizer(cfg_.optimizer, model_, cfg_.lr, cfg_.weight_decay);
  model_.set_training(true);
  auto save = [&](const std::string& file) {
    if (!cfg_.run_dir) return;
    const fs::path p = dir / file;
    save_weights(model_, p);
    rep.checkpoints.push_back(p.string());
    if (mode != TrackerMode::kOff) tracker.register_artifact(p, "checkpoint");
  };
  try {
    for (std::int64_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      double sum = 0.0;
      for (std::size_t bi = 0; bi < batches_.size(); ++bi) {
        const Fields outputs = forward_(model_, batches_[bi]);
        Tensor loss = binding_.evaluate(outputs, batches_[bi]);
        const double v = loss.item();
        if (!std::isfinite(v)) throw NonFiniteLoss(epoch, bi, v);
        opt.zero_grad();
        loss.backward();
        opt.step();
        opt.zero_grad();
        ++rep.steps;
        sum += v;
        tracker.log_event("batch_loss", {{"epoch", epoch}, {"step", rep.steps}, {"batch", bi},
                                         {"batches", batches_.size()}, {"total", v},
                                         {"parts", ordered_json::object()}});
      }
      rep.epoch_losses.push_back(sum / static_cast<double>(batches_.size()));
      tracker.log_event("epoch_loss", {{"epoch", epoch}, {"total", rep.epoch_losses.back()},
                                       {"parts", ordered_json::object()}});
      if (cfg_.checkpoint_interval > 0 && epoch % cfg_.checkpoint_interval == 0)
        save(fmt::format("ckpt_epoch{}.bin", epoch));
    }
  } catch (const std::exception& e) {
    tracker.log_event("summary", {{"status", "failed"}, {"error", e.what()},
                                  {"epochs_completed", rep.epoch_losses.size()}});
    throw;
  }
  save("ckpt_final.bin");
  model_.set_training(false);
  ordered_json s = {{"status", "finished"},
                    {"epochs_completed", rep.epoch_losses.size()},
                    {"global_step", rep.steps},
                    {"best_loss", *std::min_element(rep.epoch_losses.begin(), rep.epoch_losses.end())},
                    {"final_loss", rep.epoch_losses.back()}};
  tracker.log_event("summary", s);
  return rep;
}

}  // namespace sslkit
