#pragma once

// Bring-your-own-model training: losses bound to model outputs and batch
// fields by declared parameter names, optional low-rank adapters, and weight
// loading for continued training.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sslkit/checkpoint.hpp"
#include "sslkit/nn.hpp"
#include "sslkit/tracking.hpp"

namespace sslkit {

struct UnboundParameter : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct MissingField : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NoTargetsMatched : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct RankTooLarge : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IncompleteWeights : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
class ShapeMismatch : public std::invalid_argument {
 public:
  explicit ShapeMismatch(std::vector<std::string> offenders);
  const std::vector<std::string>& offenders() const { return offenders_; }

 private:
  std::vector<std::string> offenders_;
};

/// Named tensors flowing in and out of a user model.
using Fields = std::map<std::string, Tensor>;
using ModelForward = std::function<Fields(Module&, const Fields& batch)>;

/// A loss callable with its declared parameter names, in call order.
struct LossFn {
  std::vector<std::string> params;
  std::function<Tensor(std::span<const Tensor>)> fn;
};

enum class FieldSource { kModelOutput, kBatchField };

struct LossBinding {
  LossFn loss;
  std::vector<std::pair<std::string, FieldSource>> plan;
  /// Names found in both sources (bound to the model output).
  std::vector<std::string> collisions;

  /// Loss for one step. MissingField when a planned field is absent.
  Tensor evaluate(const Fields& outputs, const Fields& batch) const;
  json to_json() const;
};

/// Resolves every declared parameter against the two schemas; model outputs
/// win on collisions.
LossBinding bind_loss(LossFn loss, const std::vector<std::string>& model_outputs,
                      const std::vector<std::string>& batch_fields);

struct AdapterConfig {
  std::size_t r = 8;
  double alpha = 32.0;
  double dropout = 0.1;
  std::vector<std::string> target_modules = {"query", "key", "value"};
  std::string bias = "none";  // none | all | lora_only
  std::string task_type = "FEATURE_EXTRACTION";
  std::uint64_t seed = 0;

  void check() const;
  json to_json() const;
};

struct AdapterReport {
  std::vector<std::string> matched;
  std::size_t added_params = 0;      // sum of r * (d_in + d_out)
  std::size_t trainable_params = 0;  // adapters plus biases left trainable
  std::size_t total_params = 0;
  double trainable_fraction = 0.0;
  std::string task_type;
  json to_json() const;
};

/// Wraps every Linear whose dotted name contains a target pattern with an
/// adapter and freezes everything else (biases per cfg.bias).
AdapterReport inject_lora(Module& model, const AdapterConfig& cfg);

struct LoadReport {
  std::vector<std::string> loaded, missing, unexpected;
  json to_json() const;
};

/// Model state in the checkpoint container.
void save_weights(const Module& model, const std::filesystem::path& path);

/// Loads matching tensors. Source names are looked up as `prefix + name`
/// after a leading "model/" is dropped. Shape conflicts are collected and
/// thrown together before anything is written; with `strict`, missing or
/// unexpected names are an error too.
LoadReport continue_from_weights(Module& model, const std::map<std::string, NdArray>& weights,
                                 bool strict = true, const std::string& prefix = "");
LoadReport continue_from_weights(Module& model, const std::filesystem::path& source,
                                 bool strict = true, const std::string& prefix = "");

struct GenericConfig {
  std::int64_t epochs = 10;
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double lr = 1e-3;
  double weight_decay = 0.0;
  bool use_lora = false;
  AdapterConfig lora;
  std::optional<std::filesystem::path> run_dir;
  std::string run_id = "generic";
  TrackerMode tracker_mode = TrackerMode::kLocal;
  std::int64_t checkpoint_interval = 0;

  /// Accepts the keyword form: epochs, optimizer, lr, weight_decay, use_lora,
  /// r, lora_alpha, target_modules, lora_dropout, bias, task_type.
  static GenericConfig from_json(const json& j);
  json to_json() const;
};

struct FitReport {
  std::vector<double> epoch_losses;
  std::int64_t steps = 0;
  json binding;
  std::optional<AdapterReport> adapter;
  std::vector<std::string> checkpoints;
  json to_json() const;
};

class GenericTrainer {
 public:
  /// Binds the loss against `model_outputs` and the fields of the first
  /// batch, and injects adapters when cfg.use_lora is set.
  GenericTrainer(Module& model, ModelForward forward, LossFn loss,
                 std::vector<std::string> model_outputs, std::vector<Fields> batches,
                 GenericConfig cfg);

  FitReport fit();
  void add_listener(EventListener l) { listeners_.push_back(std::move(l)); }

  const LossBinding& binding() const { return binding_; }
  const std::optional<AdapterReport>& adapter_report() const { return adapter_; }

 private:
  Module& model_;
  ModelForward forward_;
  LossBinding binding_;
  std::vector<Fields> batches_;
  GenericConfig cfg_;
  std::optional<AdapterReport> adapter_;
  std::vector<EventListener> listeners_;
};

}  // namespace sslkit
