#include "sslkit/trainer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace sslkit {

namespace fs = std::filesystem;

NonFiniteLoss::NonFiniteLoss(std::int64_t epoch, std::size_t batch_index, double value)
    : std::runtime_error(fmt::format("non-finite loss {} at epoch {}, batch {}", value, epoch,
                                     batch_index)),
      epoch_(epoch),
      batch_(batch_index) {}

// ---------------------------------------------------------------------------
// Sharding

std::vector<std::pair<std::size_t, std::size_t>> shard_ranges(std::size_t batch,
                                                              std::size_t n_shards) {
  if (n_shards == 0) throw ShardTooSmall("n_shards must be at least 1");
  const std::size_t per = (batch + n_shards - 1) / n_shards;
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s < n_shards; ++s) {
    const std::size_t b = std::min(batch, s * per), e = std::min(batch, (s + 1) * per);
    if (b == e)
      throw ShardTooSmall(fmt::format("batch of {} cannot fill {} shards", batch, n_shards));
    out.emplace_back(b, e);
  }
  return out;
}

LossOutput sharded_loss(MethodInstance& m, const Batch& b, std::size_t n_shards) {
  if (n_shards <= 1) return m.compute_loss(b);
  const auto ranges = shard_ranges(b.size, n_shards);

  if (m.batch_coupled()) {
    std::vector<std::vector<Tensor>> per_feature;
    for (const auto& [lo, hi] : ranges) {
      auto feats = m.features(b.slice(lo, hi));
      if (per_feature.empty()) per_feature.resize(feats.size());
      for (std::size_t i = 0; i < feats.size(); ++i) per_feature[i].push_back(feats[i]);
    }
    std::vector<Tensor> gathered;
    for (const auto& parts : per_feature) gathered.push_back(ops::concat_rows(parts));
    return m.loss_from(gathered);
  }

  std::vector<LossOutput> outs;
  double total_w = 0.0;
  for (const auto& [lo, hi] : ranges) {
    outs.push_back(m.compute_loss(b.slice(lo, hi)));
    total_w += outs.back().weight;
  }
  LossOutput r;
  r.weight = total_w;
  for (const auto& o : outs) {
    const double w = o.weight / total_w;
    Tensor term = ops::mul_scalar(o.loss, w);
    r.loss = r.loss.defined() ? ops::add(r.loss, term) : term;
    r.total += w * o.total;
    for (const auto& [k, v] : o.parts) r.parts[k] += w * v;
    for (const auto& [k, v] : o.diagnostics) r.diagnostics[k] += w * v;
  }
  return r;
}

// ---------------------------------------------------------------------------

json TrainReport::to_json() const {
  json j = {{"run_id", run_id},
            {"run_dir", run_dir.string()},
            {"status", status},
            {"epoch_losses", epoch_losses},
            {"val_losses", val_losses},
            {"checkpoints", checkpoints},
            {"epochs_completed", epochs_completed},
            {"global_step", global_step},
            {"resumed_from_epoch", resumed_from_epoch},
            {"mixed_precision", mixed_precision},
            {"wall_time_s", wall_time_s}};
  if (hpo) j["hpo"] = *hpo;
  return j;
}

fs::path run_directory(const RunConfig& cfg, const std::string& run_id) {
  return fs::path(cfg.save_dir) / "runs" / run_id;
}

std::string default_run_id(const RunConfig& cfg) {
  return "run-" + config_hash(cfg).substr(0, 12);
}

namespace {

constexpr double kInitialLossScale = 1024.0;
constexpr std::int64_t kScaleGrowthInterval = 200;

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

ordered_json parts_json(const std::map<std::string, double>& parts) {
  ordered_json j = ordered_json::object();
  for (const auto& [k, v] : parts) j[k] = v;
  return j;
}

void apply_tuned(RunConfig& cfg, const json& p) {
  cfg.learning_rate = p.at("learning_rate").get<double>();
  cfg.weight_decay = p.at("weight_decay").get<double>();
  cfg.batch_size = p.at("batch_size").get<std::int64_t>();
}

// Size-1 batches cannot be split into positive pairs for coupled methods.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   std::size_t bs, bool coupled) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += bs) {
    const std::size_t e = std::min(order.size(), i + bs);
    if (coupled && e - i < 2) continue;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

}  // namespace

Trainer::Trainer(RunConfig cfg, TrainOptions opt)
    : original_(cfg),
      cfg_(std::move(cfg)),
      opt_(std::move(opt)),
      data_rng_(derive_seed({static_cast<std::uint64_t>(cfg_.seed), 0xDA7A})) {
  run_id_ = opt_.run_id.empty() ? default_run_id(original_) : opt_.run_id;
}

Trainer::~Trainer() = default;

MethodInstance& Trainer::method() {
  if (!method_) throw std::logic_error("trainer has not built its method yet");
  return *method_;
}

void Trainer::prepare(const Dataset& data) {
  if (!method_) build(data);
}

fs::path Trainer::run_dir() const { return run_directory(cfg_, run_id_); }

void Trainer::build(const Dataset& data) {
  BuildContext ctx = opt_.context;
  ctx.data = infer_data_shape(data);
  method_ = build_method(cfg_, ctx);
  optim_ = std::make_unique<Optimizer>(
      build_optimizer(cfg_.optimizer, *method_, cfg_.learning_rate, cfg_.weight_decay));
}

CheckpointData Trainer::snapshot(std::int64_t epoch, const std::string& status) const {
  if (!method_) throw std::logic_error("nothing to snapshot before the method is built");
  CheckpointData c;
  c.config_text = export_config(original_);
  c.config_hash = config_hash(original_);
  c.epoch = epoch;
  c.step = step_;
  c.meta = {{"run_id", run_id_},
            {"status", status},
            {"method", method_->key()},
            {"data_rng", data_rng_.state()},
            {"loss_scale", loss_scale_},
            {"good_steps", good_steps_},
            {"epoch_losses", epoch_losses_},
            {"val_losses", val_losses_}};
  if (cfg_.use_hpo)
    c.meta["hpo_best"] = {{"learning_rate", cfg_.learning_rate},
                          {"weight_decay", cfg_.weight_decay},
                          {"batch_size", cfg_.batch_size}};
  if (hpo_summary_) c.meta["hpo"] = *hpo_summary_;
  for (const auto& nt : method_->named_state()) c.arrays["model/" + nt.name] = nt.tensor.array();
  for (auto& [k, v] : optim_->state()) c.arrays["optim/" + k] = v;
  return c;
}

void Trainer::restore(const CheckpointData& ckpt) {
  if (!method_) throw std::logic_error("restore needs a built method");
  if (ckpt.config_hash != config_hash(original_))
    throw ResumeMismatch(fmt::format("checkpoint config hash {} does not match run config {}",
                                     ckpt.config_hash.substr(0, 12),
                                     config_hash(original_).substr(0, 12)));
  for (auto& nt : method_->named_state()) {
    const auto it = ckpt.arrays.find("model/" + nt.name);
    if (it == ckpt.arrays.end())
      throw ResumeMismatch("checkpoint lacks model state '" + nt.name + "'");
    if (it->second.shape != nt.tensor.shape())
      throw ResumeMismatch(fmt::format("shape of '{}' is {} in the checkpoint, {} in the model",
                                       nt.name, shape_str(it->second.shape),
                                       shape_str(nt.tensor.shape())));
    std::copy(it->second.data.begin(), it->second.data.end(), nt.tensor.mutable_values().begin());
  }
  std::map<std::string, NdArray> ostate;
  for (const auto& [k, v] : ckpt.arrays)
    if (k.rfind("optim/", 0) == 0) ostate[k.substr(6)] = v;
  optim_->load_state(ostate);

  const auto& m = ckpt.meta;
  data_rng_.set_state(m.at("data_rng").get<std::string>());
  loss_scale_ = m.value("loss_scale", 1.0);
  good_steps_ = m.value("good_steps", std::int64_t{0});
  epoch_losses_ = m.value("epoch_losses", std::vector<double>{});
  val_losses_ = m.value("val_losses", std::vector<double>{});
  if (m.contains("hpo")) hpo_summary_ = m.at("hpo");
  epoch_ = ckpt.epoch;
  step_ = ckpt.step;
}

std::optional<fs::path> Trainer::find_latest_checkpoint() const {
  const fs::path dir = run_dir();
  if (!fs::is_directory(dir)) return std::nullopt;
  std::optional<fs::path> best;
  std::int64_t best_epoch = -1;
  bool best_final = false;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("ckpt_", 0) != 0 || e.path().extension() != ".bin") continue;
    std::int64_t epoch;
    try {
      epoch = load_checkpoint(e.path()).epoch;
    } catch (const CorruptCheckpoint&) {
      continue;
    }
    const bool final = name == "ckpt_final.bin";
    if (epoch > best_epoch || (epoch == best_epoch && final && !best_final)) {
      best = e.path();
      best_epoch = epoch;
      best_final = final;
    }
  }
  return best;
}

double Trainer::validation_loss(const Dataset& val) {
  NoGradGuard ng;
  std::vector<std::size_t> order(val.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batches =
      make_batches(order, static_cast<std::size_t>(cfg_.batch_size), method_->batch_coupled());
  double sum = 0.0, count = 0.0;
  for (const auto& idx : batches) {
    const Batch b = load_batch(val, idx, method_->policy(), cfg_.seed, 0);
    const LossOutput out = method_->compute_loss(b);
    sum += out.total * static_cast<double>(idx.size());
    count += static_cast<double>(idx.size());
  }
  return count > 0 ? sum / count : std::nan("");
}

TrainReport Trainer::train(const Dataset& train, const Dataset* val) {
  if (train.size() == 0) throw DatasetEmpty("training dataset is empty");
  const auto t0 = std::chrono::steady_clock::now();

  std::optional<CheckpointData> resume;
  if (opt_.resume_from) {
    resume = load_checkpoint(*opt_.resume_from);
  } else if (cfg_.reload_checkpoint && opt_.write_files) {
    if (auto p = find_latest_checkpoint()) resume = load_checkpoint(*p);
  }
  if (resume && resume->config_hash != config_hash(original_))
    throw ResumeMismatch("checkpoint was written by a different configuration");

  if (cfg_.use_hpo) {
    if (resume && resume->meta.contains("hpo_best")) {
      apply_tuned(cfg_, resume->meta.at("hpo_best"));
      if (resume->meta.contains("hpo")) hpo_summary_ = resume->meta.at("hpo");
    } else {
      const auto log_dir = opt_.write_files ? std::optional<fs::path>(run_dir() / "hpo")
                                            : std::nullopt;
      const SearchResult res = run_hpo(original_, train, val, opt_.context, log_dir);
      apply_tuned(cfg_, res.best_params.to_json());
      hpo_summary_ = res.summary();
      method_.reset();
    }
  }
  if (!method_) build(train);
  optim_->set_lr(cfg_.learning_rate);

  TrainReport rep;
  rep.run_id = run_id_;
  rep.run_dir = run_dir();
  if (resume) {
    restore(*resume);
    rep.resumed_from_epoch = epoch_;
  }

  const TrackerMode mode = opt_.write_files ? cfg_.tracker_mode : TrackerMode::kOff;
  if (opt_.write_files) fs::create_directories(rep.run_dir);
  Tracker tracker(rep.run_dir, run_id_, mode, mode == TrackerMode::kRemote ? opt_.remote : RemoteHook{},
                  resume.has_value());
  for (const auto& l : opt_.listeners) tracker.add_listener(l);

  tracker.log_event("config", config_to_json(original_));
  if (opt_.write_files) {
    const fs::path cpath = rep.run_dir / "config.json";
    std::ofstream(cpath, std::ios::binary) << export_config(original_);
    if (mode != TrackerMode::kOff) tracker.register_artifact(cpath, "config");
  }
  if (hpo_summary_ && !resume) {
    ordered_json w = {{"message", "hyperparameter search finished"},
                      {"source", "hpo"},
                      {"best", ordered_json::parse(hpo_summary_->at("best_params").dump())}};
    tracker.log_event("warning", w);
  }

  bool mixed = false;
  if (cfg_.mixed_precision) {
    mixed = !opt_.mixed_precision_probe || opt_.mixed_precision_probe();
    if (!mixed)
      tracker.log_event("warning",
                        {{"message", "reduced precision unavailable; training in full precision"},
                         {"source", "trainer"}});
    else if (!resume)
      loss_scale_ = kInitialLossScale;
  }
  rep.mixed_precision = mixed;
  if (opt_.system_sampler && mode != TrackerMode::kOff) tracker.start_system_sampler();

  const std::size_t n_shards =
      cfg_.use_data_parallel ? static_cast<std::size_t>(cfg_.n_shards) : 1;
  const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
  const std::size_t steps_per_epoch =
      make_batches(std::vector<std::size_t>(train.size()), bs, method_->batch_coupled()).size();
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg_.epochs);
  auto params = method_->named_parameters();

  auto save = [&](const std::string& file, std::int64_t epoch, const std::string& status) {
    if (!opt_.write_files) return;
    const fs::path p = rep.run_dir / file;
    save_checkpoint(p, snapshot(epoch, status));
    rep.checkpoints.push_back(p.string());
    if (mode != TrackerMode::kOff) tracker.register_artifact(p, "checkpoint");
  };

  auto finish = [&](const std::string& status) {
    rep.status = status;
    rep.epoch_losses = epoch_losses_;
    rep.val_losses = val_losses_;
    rep.epochs_completed = epoch_;
    rep.global_step = step_;
    rep.hpo = hpo_summary_;
    rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ordered_json s = {{"status", status},
                      {"wall_time_s", rep.wall_time_s},
                      {"epochs_completed", epoch_},
                      {"global_step", step_}};
    if (!epoch_losses_.empty()) {
      s["best_loss"] = *std::min_element(epoch_losses_.begin(), epoch_losses_.end());
      s["final_loss"] = epoch_losses_.back();
    }
    return s;
  };

  std::string status = "finished";
  try {
    for (std::int64_t epoch = epoch_ + 1; epoch <= cfg_.epochs; ++epoch) {
      std::vector<std::size_t> order(train.size());
      std::iota(order.begin(), order.end(), 0);
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[data_rng_.below(i)]);
      const auto batches = make_batches(order, bs, method_->batch_coupled());

      double sum = 0.0, count = 0.0;
      std::map<std::string, double> part_sums;
      for (std::size_t bi = 0; bi < batches.size(); ++bi) {
        const auto& idx = batches[bi];
        const Batch b = load_batch(train, idx, method_->policy(), cfg_.seed,
                                   static_cast<std::uint64_t>(epoch));
        optim_->set_lr(scheduled_lr(cfg_.lr_schedule, cfg_.learning_rate,
                                    static_cast<std::size_t>(step_), total_steps));
        LossOutput out;
        {
          PrecisionGuard pg(mixed ? Precision::kMixed : Precision::kFull);
          out = sharded_loss(*method_, b, n_shards);
          if (!std::isfinite(out.total)) throw NonFiniteLoss(epoch, bi, out.total);
          optim_->zero_grad();
          out.loss.backward(mixed ? loss_scale_ : 1.0);
        }
        bool stepped = true;
        if (mixed) {
          bool finite = true;
          for (auto& nt : params) {
            if (!nt.tensor.has_grad()) continue;
            auto g = nt.tensor.mutable_grad();
            for (double& x : g) x /= loss_scale_;
            finite = finite && all_finite(g);
          }
          if (!finite) {
            stepped = false;
            loss_scale_ /= 2.0;
            good_steps_ = 0;
            tracker.log_event("warning", {{"message", "non-finite gradients; step skipped"},
                                          {"source", "trainer"},
                                          {"loss_scale", loss_scale_}});
          } else if (++good_steps_ >= kScaleGrowthInterval) {
            loss_scale_ *= 2.0;
            good_steps_ = 0;
          }
        }
        if (stepped) {
          optim_->step();
          method_->post_step();
        }
        optim_->zero_grad();
        ++step_;

        const double n = static_cast<double>(idx.size());
        sum += out.total * n;
        count += n;
        for (const auto& [k, v] : out.parts) part_sums[k] += v * n;
        rep.batch_losses.push_back(out.total);
        tracker.log_event("batch_loss", {{"epoch", epoch},
                                         {"step", step_},
                                         {"batch", bi},
                                         {"batches", batches.size()},
                                         {"total", out.total},
                                         {"parts", parts_json(out.parts)}});
      }

      const double epoch_loss = sum / count;
      for (auto& [k, v] : part_sums) v /= count;
      epoch_losses_.push_back(epoch_loss);
      tracker.log_event("epoch_loss",
                        {{"epoch", epoch}, {"total", epoch_loss}, {"parts", parts_json(part_sums)}});
      std::optional<double> vl;
      if (val && val->size() > 0) {
        vl = validation_loss(*val);
        val_losses_.push_back(*vl);
        tracker.log_event("val_loss", {{"epoch", epoch}, {"total", *vl}});
      }
      epoch_ = epoch;

      if (cfg_.embedding_logging && mode != TrackerMode::kOff) {
        const std::size_t n = std::min(train.size(), opt_.embedding_points);
        if (n >= 3) {
          const auto policy = AugmentationPolicy::identity(method_->modality());
          std::vector<NdArray> chunks;
          std::vector<std::int64_t> labels;
          for (std::size_t i = 0; i < n; i += bs) {
            std::vector<std::size_t> idx(std::min(bs, n - i));
            std::iota(idx.begin(), idx.end(), i);
            const Batch b = load_batch(train, idx, policy, cfg_.seed, 0);
            chunks.push_back(method_->embed(b));
            for (std::size_t k = 0; k < idx.size(); ++k)
              labels.push_back(b.labels.empty() ? 0 : b.labels[k]);
          }
          const std::size_t d = chunks.front().dim(1);
          NdArray all({n, d});
          std::size_t off = 0;
          for (const auto& c : chunks) {
            std::copy(c.data.begin(), c.data.end(), all.data.begin() + static_cast<std::ptrdiff_t>(off));
            off += c.data.size();
          }
          tracker.log_embedding_frame(all, labels, epoch);
        }
      }

      if (cfg_.checkpoint_interval > 0 && epoch % cfg_.checkpoint_interval == 0)
        save(fmt::format("ckpt_epoch{}.bin", epoch), epoch, "running");

      const bool callback_stop = opt_.on_epoch && opt_.on_epoch(epoch, epoch_loss, vl);
      const bool flag_stop = opt_.stop && opt_.stop->load();
      if (callback_stop || flag_stop) {
        if (epoch < cfg_.epochs) status = "stopped";
        break;
      }
    }
  } catch (const std::exception& e) {
    ordered_json s = finish("failed");
    s["error"] = e.what();
    tracker.log_event("summary", s);
    tracker.close();
    throw;
  }

  save("ckpt_final.bin", epoch_, status);
  ordered_json summary = finish(status);
  if (opt_.write_files) {
    const fs::path rp = rep.run_dir / "report.json";
    std::ofstream(rp) << rep.to_json().dump(2) << "\n";
    if (mode != TrackerMode::kOff) tracker.register_artifact(rp, "report");
  }
  tracker.log_event("summary", summary);
  tracker.close();
  return rep;
}

// ---------------------------------------------------------------------------

SearchResult run_hpo(const RunConfig& cfg, const Dataset& train, const Dataset* val,
                     const BuildContext& ctx, const std::optional<fs::path>& log_dir) {
  SearchOptions so;
  so.n_trials = static_cast<std::size_t>(cfg.n_trials);
  so.seed = static_cast<std::uint64_t>(cfg.seed);
  if (log_dir) {
    fs::create_directories(*log_dir);
    so.log_path = *log_dir / "trials.jsonl";
    so.summary_path = *log_dir / "summary.json";
  }
  Objective objective = [&](const TrialParams& p, const TrialReporter& report) -> double {
    RunConfig tc = cfg;
    tc.use_hpo = false;
    tc.reload_checkpoint = false;
    tc.epochs = cfg.tuning_epochs;
    apply_tuned(tc, p.to_json());
    TrainOptions to;
    to.context = ctx;
    to.write_files = false;
    to.system_sampler = false;
    double last = std::numeric_limits<double>::infinity();
    to.on_epoch = [&](std::int64_t epoch, double tl, std::optional<double> vl) {
      last = vl ? *vl : tl;
      return report(epoch, last);
    };
    try {
      Trainer(tc, to).train(train, val);
    } catch (const NonFiniteLoss&) {
      return std::numeric_limits<double>::infinity();
    }
    return last;
  };
  return run_search(SearchSpace{}, objective, so);
}

}  // namespace sslkit
