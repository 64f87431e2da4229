#pragma once

// Pretext training loop: batching, sharded loss evaluation, optimizer steps,
// checkpoints, resume, tracking and optional HPO delegation.

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sslkit/checkpoint.hpp"
#include "sslkit/hpo.hpp"
#include "sslkit/methods.hpp"
#include "sslkit/optim.hpp"
#include "sslkit/tracking.hpp"

namespace sslkit {

struct DatasetEmpty : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ResumeMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShardTooSmall : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::int64_t epoch, std::size_t batch_index, double value);
  std::int64_t epoch() const { return epoch_; }
  std::size_t batch_index() const { return batch_; }

 private:
  std::int64_t epoch_;
  std::size_t batch_;
};

/// Loss of `b` evaluated as `n_shards` replicas. One shard is exactly
/// compute_loss(b). Batch-coupled methods gather per-shard features and
/// evaluate the loss once; separable methods combine shard losses weighted by
/// their averaging units.
LossOutput sharded_loss(MethodInstance& m, const Batch& b, std::size_t n_shards);
/// Row ranges [begin, end) of each shard (ceil(B / n) rows per shard).
std::vector<std::pair<std::size_t, std::size_t>> shard_ranges(std::size_t batch, std::size_t n_shards);

struct TrainOptions {
  /// Defaults to "run-" + the first 12 hex digits of the config hash.
  std::string run_id;
  BuildContext context;  // data shape is always taken from the dataset
  RemoteHook remote;
  std::vector<EventListener> listeners;
  /// Checked at epoch boundaries; when set, training ends after the current
  /// epoch with a final checkpoint and status "stopped".
  std::shared_ptr<std::atomic<bool>> stop;
  /// Explicit checkpoint to resume from. Without it, cfg.reload_checkpoint
  /// picks the newest checkpoint in the run directory.
  std::optional<std::filesystem::path> resume_from;
  /// Reports whether reduced precision is available; null means yes.
  std::function<bool()> mixed_precision_probe;
  /// Called after each epoch with (epoch, train loss, val loss); returning
  /// true ends training after this epoch.
  std::function<bool(std::int64_t, double, std::optional<double>)> on_epoch;
  /// When false no run directory, checkpoints or logs are written.
  bool write_files = true;
  bool system_sampler = true;
  /// Points per embedding frame when cfg.embedding_logging is on.
  std::size_t embedding_points = 256;
};

struct TrainReport {
  std::string run_id;
  std::filesystem::path run_dir;
  std::string status;  // finished | stopped
  std::vector<double> epoch_losses;  // whole run, including epochs before a resume
  std::vector<double> val_losses;
  std::vector<double> batch_losses;  // this session only
  std::vector<std::string> checkpoints;
  std::int64_t epochs_completed = 0;
  std::int64_t global_step = 0;
  std::int64_t resumed_from_epoch = 0;
  bool mixed_precision = false;
  double wall_time_s = 0.0;
  std::optional<json> hpo;
  json to_json() const;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, TrainOptions opt = {});
  ~Trainer();

  TrainReport train(const Dataset& train, const Dataset* val = nullptr);

  const RunConfig& config() const { return cfg_; }
  /// Available after train() started (or after prepare()).
  MethodInstance& method();
  /// Builds the method for `data` without training.
  void prepare(const Dataset& data);
  std::filesystem::path run_dir() const;
  const std::string& run_id() const { return run_id_; }

  /// Checkpoint of the current state.
  CheckpointData snapshot(std::int64_t epoch, const std::string& status) const;
  /// Restores method, optimizer and RNG state; ResumeMismatch on a config
  /// hash mismatch.
  void restore(const CheckpointData& ckpt);

 private:
  void build(const Dataset& data);
  std::optional<std::filesystem::path> find_latest_checkpoint() const;
  double validation_loss(const Dataset& val);

  RunConfig original_;  // as submitted; hashed into checkpoints
  RunConfig cfg_;       // with tuned hyperparameters applied
  TrainOptions opt_;
  std::string run_id_;
  std::unique_ptr<MethodInstance> method_;
  std::unique_ptr<Optimizer> optim_;
  Rng data_rng_;
  double loss_scale_ = 1.0;
  std::int64_t good_steps_ = 0;
  std::int64_t epoch_ = 0;
  std::int64_t step_ = 0;
  std::vector<double> epoch_losses_, val_losses_;
  std::optional<json> hpo_summary_;
};

/// Runs the search for cfg (tuning_epochs per trial) and returns its result.
SearchResult run_hpo(const RunConfig& cfg, const Dataset& train, const Dataset* val,
                     const BuildContext& ctx = {},
                     const std::optional<std::filesystem::path>& log_dir = std::nullopt);

/// Directory a run writes to: {save_dir}/runs/{run_id}.
std::filesystem::path run_directory(const RunConfig& cfg, const std::string& run_id);
std::string default_run_id(const RunConfig& cfg);

}  // namespace sslkit
