#pragma once

// Method registry and the canonical run configuration.
//
// A RunConfig round-trips through JSON byte-for-byte: export_config() writes
// the fixed section order modality, method, backbone, method_params, training,
// runtime, eval_template with keys sorted inside each section.

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace sslkit {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

enum class Modality { kAudio, kVision, kGraph, kCrossmodal };
std::string_view modality_name(Modality m);
std::optional<Modality> parse_modality(std::string_view s);

enum class FieldType { kInt, kFloat, kString, kBool, kEnum };
std::string_view field_type_name(FieldType t);

struct SchemaField {
  std::string name;
  FieldType type = FieldType::kFloat;
  json default_value;
  std::optional<double> min;
  std::optional<double> max;
  bool min_exclusive = false;
  bool max_exclusive = false;
  std::vector<std::string> choices;  // kEnum only
  bool required = false;
  std::string help;
};

struct FieldError {
  std::string path;
  std::string constraint;
};

class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<FieldError> errors);
  const std::vector<FieldError>& errors() const { return errors_; }
  json to_json() const;

 private:
  std::vector<FieldError> errors_;
};

class ConfigSchema {
 public:
  ConfigSchema() = default;
  explicit ConfigSchema(std::vector<SchemaField> fields);

  ConfigSchema& add(SchemaField f);
  /// Convenience builders.
  ConfigSchema& add_int(std::string name, std::int64_t def, std::optional<double> min = {},
                        std::optional<double> max = {}, std::string help = {});
  ConfigSchema& add_float(std::string name, double def, std::optional<double> min = {},
                          std::optional<double> max = {}, bool min_exclusive = false,
                          std::string help = {});
  ConfigSchema& add_bool(std::string name, bool def, std::string help = {});
  ConfigSchema& add_enum(std::string name, std::string def,
                         std::vector<std::string> choices, std::string help = {});
  ConfigSchema& add_string(std::string name, std::string def, std::string help = {});

  const std::vector<SchemaField>& fields() const { return fields_; }
  const SchemaField* find(std::string_view name) const;

  /// Fills defaults and checks every constraint. Violations are appended to
  /// `errors` with paths under `path_prefix`; the returned object is only
  /// meaningful when no errors were added.
  json validate(const json& raw, const std::string& path_prefix,
                std::vector<FieldError>& errors) const;
  /// Checks that the schema's own defaults pass validation.
  std::vector<FieldError> self_check() const;
  json to_json() const;

 private:
  std::vector<SchemaField> fields_;
};

enum class OptimizerKind { kAdam, kAdamW, kSgd };
std::string_view optimizer_name(OptimizerKind k);
std::optional<OptimizerKind> parse_optimizer(std::string_view s);

enum class TrackerMode { kOff, kLocal, kRemote };
std::string_view tracker_mode_name(TrackerMode m);

struct EvalTemplate {
  std::int64_t num_classes = 2;
  std::int64_t batch_size = 64;
  double lr = 1e-3;
  std::int64_t epochs = 10;
  bool freeze_backbone = true;
  bool operator==(const EvalTemplate&) const = default;
};

struct RunConfig {
  Modality modality = Modality::kVision;
  std::string method;
  std::string backbone = "default";  // default | user
  json method_params = json::object();

  // training
  std::int64_t batch_size = 32;
  std::int64_t epochs = 10;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  bool use_hpo = false;
  std::int64_t n_trials = 20;
  std::int64_t tuning_epochs = 5;
  std::string lr_schedule = "constant";  // constant | cosine

  // runtime
  bool use_data_parallel = false;
  std::int64_t n_shards = 2;
  bool mixed_precision = false;
  std::int64_t checkpoint_interval = 10;
  bool reload_checkpoint = false;
  std::string save_dir = "./";
  TrackerMode tracker_mode = TrackerMode::kLocal;
  std::int64_t seed = 0;
  bool embedding_logging = false;

  std::optional<EvalTemplate> eval_template;

  bool operator==(const RunConfig&) const = default;

  double param_double(const std::string& name) const;
  std::int64_t param_int(const std::string& name) const;
  bool param_bool(const std::string& name) const;
  std::string param_string(const std::string& name) const;
};

class MethodInstance;
class Encoder;

struct BuildContext;  // defined in methods.hpp

using MethodFactory = std::function<std::unique_ptr<MethodInstance>(
    const RunConfig&, const BuildContext&)>;

struct MethodSpec {
  std::string key;
  Modality modality = Modality::kVision;
  ConfigSchema schema;
  MethodFactory factory;
  std::string description;
};

class DuplicateKey : public std::invalid_argument {
 public:
  explicit DuplicateKey(const std::string& key);
};

class UnknownMethod : public std::invalid_argument {
 public:
  UnknownMethod(const std::string& key, std::vector<std::string> available);
  const std::vector<std::string>& available() const { return available_; }

 private:
  std::vector<std::string> available_;
};

/// String-keyed method catalog. Keys are stored lowercase and looked up
/// case-insensitively.
class Registry {
 public:
  void register_method(MethodSpec spec);
  const MethodSpec& lookup(std::string_view key) const;
  bool contains(std::string_view key) const;
  std::vector<std::string> list_methods(std::optional<Modality> modality = {}) const;
  json catalog_json() const;

  /// Process-wide registry pre-populated with the shipped methods.
  static Registry& global();

 private:
  mutable std::shared_mutex mu_;
  std::map<std::string, MethodSpec> specs_;
};

std::string to_lower(std::string_view s);

/// Builds a RunConfig from parsed JSON. Accepts the sectioned canonical form
/// and flat training/runtime keys at the top level.
RunConfig validate_config(const json& raw, const Registry& registry = Registry::global());
RunConfig parse_config_text(std::string_view text, const Registry& registry = Registry::global());
ordered_json config_to_json(const RunConfig& cfg);
/// Canonical text: two-space indent, trailing newline.
std::string export_config(const RunConfig& cfg);
/// Schemas of the training, runtime and eval_template sections.
json section_schemas_json();

/// SHA-256 of the canonical export with reload_checkpoint cleared.
std::string config_hash(const RunConfig& cfg);

}  // namespace sslkit
