#include "sslkit/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>
#include <sstream>

#include "sslkit/hash.hpp"

namespace sslkit {

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::kAudio: return "audio";
    case Modality::kVision: return "vision";
    case Modality::kGraph: return "graph";
    case Modality::kCrossmodal: return "crossmodal";
  }
  return "unknown";
}

std::optional<Modality> parse_modality(std::string_view s) {
  const std::string l = to_lower(s);
  if (l == "audio") return Modality::kAudio;
  if (l == "vision") return Modality::kVision;
  if (l == "graph") return Modality::kGraph;
  if (l == "crossmodal") return Modality::kCrossmodal;
  return std::nullopt;
}

std::string_view field_type_name(FieldType t) {
  switch (t) {
    case FieldType::kInt: return "int";
    case FieldType::kFloat: return "float";
    case FieldType::kString: return "string";
    case FieldType::kBool: return "bool";
    case FieldType::kEnum: return "enum";
  }
  return "unknown";
}

std::string_view optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kAdamW: return "adamw";
    case OptimizerKind::kSgd: return "sgd";
  }
  return "unknown";
}

std::optional<OptimizerKind> parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "adamw") return OptimizerKind::kAdamW;
  if (s == "sgd") return OptimizerKind::kSgd;
  return std::nullopt;
}

std::string_view tracker_mode_name(TrackerMode m) {
  switch (m) {
    case TrackerMode::kOff: return "off";
    case TrackerMode::kLocal: return "local";
    case TrackerMode::kRemote: return "remote";
  }
  return "unknown";
}

namespace {

std::string join(const std::vector<std::string>& v, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

std::string summarize(const std::vector<FieldError>& errors) {
  std::ostringstream os;
  os << "invalid configuration (" << errors.size() << " error"
     << (errors.size() == 1 ? "" : "s") << ")";
  for (const auto& e : errors) os << "; " << e.path << ": " << e.constraint;
  return os.str();
}

std::string fmt_number(double v) {
  json j = v;
  return j.dump();
}

}  // namespace

ValidationError::ValidationError(std::vector<FieldError> errors)
    : std::runtime_error(summarize(errors)), errors_(std::move(errors)) {}

json ValidationError::to_json() const {
  json list = json::array();
  for (const auto& e : errors_) list.push_back({{"path", e.path}, {"constraint", e.constraint}});
  return {{"error", "ValidationError"}, {"errors", list}};
}

ConfigSchema::ConfigSchema(std::vector<SchemaField> fields) {
  for (auto& f : fields) add(std::move(f));
}

ConfigSchema& ConfigSchema::add(SchemaField f) {
  if (find(f.name) != nullptr) {
    throw std::invalid_argument("schema field '" + f.name + "' declared twice");
  }
  fields_.push_back(std::move(f));
  return *this;
}

ConfigSchema& ConfigSchema::add_int(std::string name, std::int64_t def,
                                    std::optional<double> min, std::optional<double> max,
                                    std::string help) {
  SchemaField f;
  f.name = std::move(name);
  f.type = FieldType::kInt;
  f.default_value = def;
  f.min = min;
  f.max = max;
  f.help = std::move(help);
  return add(std::move(f));
}

ConfigSchema& ConfigSchema::add_float(std::string name, double def,
                                      std::optional<double> min, std::optional<double> max,
                                      bool min_exclusive, std::string help) {
  SchemaField f;
  f.name = std::move(name);
  f.type = FieldType::kFloat;
  f.default_value = def;
  f.min = min;
  f.max = max;
  f.min_exclusive = min_exclusive;
  f.help = std::move(help);
  return add(std::move(f));
}

ConfigSchema& ConfigSchema::add_bool(std::string name, bool def, std::string help) {
  SchemaField f;
  f.name = std::move(name);
  f.type = FieldType::kBool;
  f.default_value = def;
  f.help = std::move(help);
  return add(std::move(f));
}

ConfigSchema& ConfigSchema::add_enum(std::string name, std::string def,
                                     std::vector<std::string> choices, std::string help) {
  SchemaField f;
  f.name = std::move(name);
  f.type = FieldType::kEnum;
  f.default_value = std::move(def);
  f.choices = std::move(choices);
  f.help = std::move(help);
  return add(std::move(f));
}

ConfigSchema& ConfigSchema::add_string(std::string name, std::string def, std::string help) {
  SchemaField f;
  f.name = std::move(name);
  f.type = FieldType::kString;
  f.default_value = std::move(def);
  f.help = std::move(help);
  return add(std::move(f));
}

const SchemaField* ConfigSchema::find(std::string_view name) const {
  for (const auto& f : fields_) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

namespace {

// Normalizes one value; returns nullopt and records an error on violation.
std::optional<json> check_field(const SchemaField& f, const json& v, const std::string& path,
                                std::vector<FieldError>& errors) {
  auto fail = [&](std::string what) {
    errors.push_back({path, std::move(what)});
    return std::nullopt;
  };
  json out;
  switch (f.type) {
    case FieldType::kBool:
      if (!v.is_boolean()) return fail("must be a boolean");
      return v;
    case FieldType::kString:
      if (!v.is_string()) return fail("must be a string");
      if (f.required && v.get<std::string>().empty()) return fail("must be non-empty");
      return v;
    case FieldType::kEnum: {
      if (!v.is_string()) return fail("must be one of " + join(f.choices, ", "));
      const std::string s = to_lower(v.get<std::string>());
      if (std::find(f.choices.begin(), f.choices.end(), s) == f.choices.end()) {
        return fail("must be one of " + join(f.choices, ", "));
      }
      return json(s);
    }
    case FieldType::kInt:
      if (!v.is_number_integer()) return fail("must be an integer");
      out = v.get<std::int64_t>();
      break;
    case FieldType::kFloat:
      if (!v.is_number()) return fail("must be a number");
      out = v.get<double>();
      if (!std::isfinite(out.get<double>())) return fail("must be finite");
      break;
  }
  const double x = out.get<double>();
  if (f.min) {
    const bool bad = f.min_exclusive ? !(x > *f.min) : !(x >= *f.min);
    if (bad) return fail(std::string("must be ") + (f.min_exclusive ? "> " : ">= ") + fmt_number(*f.min));
  }
  if (f.max) {
    const bool bad = f.max_exclusive ? !(x < *f.max) : !(x <= *f.max);
    if (bad) return fail(std::string("must be ") + (f.max_exclusive ? "< " : "<= ") + fmt_number(*f.max));
  }
  return out;
}

}  // namespace

json ConfigSchema::validate(const json& raw, const std::string& path_prefix,
                            std::vector<FieldError>& errors) const {
  json out = json::object();
  const json empty = json::object();
  const json& src = raw.is_null() ? empty : raw;
  if (!src.is_object()) {
    errors.push_back({path_prefix.empty() ? "$" : path_prefix, "must be an object"});
    return out;
  }
  auto path_of = [&](const std::string& n) {
    return path_prefix.empty() ? n : path_prefix + "." + n;
  };
  for (auto it = src.begin(); it != src.end(); ++it) {
    if (find(it.key()) == nullptr) errors.push_back({path_of(it.key()), "unknown field"});
  }
  for (const auto& f : fields_) {
    auto it = src.find(f.name);
    if (it == src.end()) {
      if (f.required) {
        errors.push_back({path_of(f.name), "is required"});
      } else {
        out[f.name] = f.default_value;
      }
      continue;
    }
    if (auto v = check_field(f, *it, path_of(f.name), errors)) out[f.name] = *v;
  }
  return out;
}

std::vector<FieldError> ConfigSchema::self_check() const {
  std::vector<FieldError> errors;
  json defaults = json::object();
  for (const auto& f : fields_) {
    if (!f.required) defaults[f.name] = f.default_value;
  }
  validate(defaults, "", errors);
  return errors;
}

json ConfigSchema::to_json() const {
  json list = json::array();
  for (const auto& f : fields_) {
    json e = {{"name", f.name},
              {"type", field_type_name(f.type)},
              {"default", f.default_value},
              {"required", f.required}};
    if (f.min) e["min"] = *f.min;
    if (f.max) e["max"] = *f.max;
    if (f.min_exclusive) e["min_exclusive"] = true;
    if (f.max_exclusive) e["max_exclusive"] = true;
    if (!f.choices.empty()) e["choices"] = f.choices;
    if (!f.help.empty()) e["help"] = f.help;
    list.push_back(std::move(e));
  }
  return list;
}

double RunConfig::param_double(const std::string& name) const {
  return method_params.at(name).get<double>();
}
std::int64_t RunConfig::param_int(const std::string& name) const {
  return method_params.at(name).get<std::int64_t>();
}
bool RunConfig::param_bool(const std::string& name) const {
  return method_params.at(name).get<bool>();
}
std::string RunConfig::param_string(const std::string& name) const {
  return method_params.at(name).get<std::string>();
}

DuplicateKey::DuplicateKey(const std::string& key)
    : std::invalid_argument("method key '" + key + "' is already registered") {}

UnknownMethod::UnknownMethod(const std::string& key, std::vector<std::string> available)
    : std::invalid_argument("unknown method '" + key + "'; available: " + join(available, ", ")),
      available_(std::move(available)) {}

void Registry::register_method(MethodSpec spec) {
  spec.key = to_lower(spec.key);
  if (spec.key.empty()) throw std::invalid_argument("method key must be non-empty");
  if (auto errs = spec.schema.self_check(); !errs.empty()) {
    throw ValidationError(std::move(errs));
  }
  std::unique_lock lock(mu_);
  if (specs_.count(spec.key)) throw DuplicateKey(spec.key);
  std::string key = spec.key;
  specs_.emplace(std::move(key), std::move(spec));
}

const MethodSpec& Registry::lookup(std::string_view key) const {
  std::shared_lock lock(mu_);
  auto it = specs_.find(to_lower(key));
  if (it == specs_.end()) {
    std::vector<std::string> keys;
    for (const auto& [k, v] : specs_) keys.push_back(k);
    throw UnknownMethod(std::string(key), std::move(keys));
  }
  return it->second;
}

bool Registry::contains(std::string_view key) const {
  std::shared_lock lock(mu_);
  return specs_.count(to_lower(key)) > 0;
}

std::vector<std::string> Registry::list_methods(std::optional<Modality> modality) const {
  std::shared_lock lock(mu_);
  std::vector<std::string> out;
  for (const auto& [k, v] : specs_) {
    if (!modality || v.modality == *modality) out.push_back(k);
  }
  return out;
}

json Registry::catalog_json() const {
  std::shared_lock lock(mu_);
  json methods = json::array();
  for (const auto& [k, v] : specs_) {
    methods.push_back({{"key", k},
                       {"modality", modality_name(v.modality)},
                       {"description", v.description},
                       {"schema", v.schema.to_json()}});
  }
  return {{"methods", methods}};
}

namespace {

const ConfigSchema& training_schema() {
  static const ConfigSchema s = [] {
    ConfigSchema c;
    c.add_int("batch_size", 32, 1, {}, "samples per optimization step");
    c.add_int("epochs", 10, 1);
    c.add_float("learning_rate", 1e-3, 0.0, {}, true);
    c.add_float("weight_decay", 0.0, 0.0);
    c.add_enum("optimizer", "adam", {"adam", "adamw", "sgd"});
    c.add_bool("use_hpo", false, "run a hyperparameter search before training");
    c.add_int("n_trials", 20, 1);
    c.add_int("tuning_epochs", 5, 1);
    c.add_enum("lr_schedule", "constant", {"constant", "cosine"});
    return c;
  }();
  return s;
}

const ConfigSchema& runtime_schema() {
  static const ConfigSchema s = [] {
    ConfigSchema c;
    c.add_bool("use_data_parallel", false);
    c.add_int("n_shards", 2, 1, {}, "replica count when use_data_parallel is set");
    c.add_bool("mixed_precision", false);
    c.add_int("checkpoint_interval", 10, 1, {}, "epochs between checkpoints");
    c.add_bool("reload_checkpoint", false);
    SchemaField dir;
    dir.name = "save_dir";
    dir.type = FieldType::kString;
    dir.default_value = "./";
    c.add(dir);
    c.add_enum("tracker_mode", "local", {"off", "local", "remote"});
    c.add_int("seed", 0, 0);
    c.add_bool("embedding_logging", false);
    return c;
  }();
  return s;
}

const ConfigSchema& eval_schema() {
  static const ConfigSchema s = [] {
    ConfigSchema c;
    c.add_int("num_classes", 2, 2);
    c.add_int("batch_size", 64, 1);
    c.add_float("lr", 1e-3, 0.0, {}, true);
    c.add_int("epochs", 10, 1);
    c.add_bool("freeze_backbone", true);
    return c;
  }();
  return s;
}

bool is_section_key(const std::string& k) {
  return k == "modality" || k == "method" || k == "backbone" || k == "method_params" ||
         k == "training" || k == "runtime" || k == "eval_template";
}

// Collects a section from its nested object plus any flat top-level aliases.
json gather_section(const json& raw, const std::string& name, const ConfigSchema& schema,
                    std::vector<FieldError>& errors) {
  json merged = json::object();
  if (auto it = raw.find(name); it != raw.end() && !it->is_null()) {
    if (!it->is_object()) {
      errors.push_back({name, "must be an object"});
    } else {
      merged = *it;
    }
  }
  for (const auto& f : schema.fields()) {
    auto it = raw.find(f.name);
    if (it == raw.end()) continue;
    if (merged.contains(f.name)) {
      errors.push_back({f.name, "given both at top level and in '" + name + "'"});
      continue;
    }
    merged[f.name] = *it;
  }
  return merged;
}

}  // namespace

json section_schemas_json() {
  return {{"training", training_schema().to_json()},
          {"runtime", runtime_schema().to_json()},
          {"eval_template", eval_schema().to_json()}};
}

RunConfig validate_config(const json& raw, const Registry& registry) {
  std::vector<FieldError> errors;
  RunConfig cfg;
  if (!raw.is_object()) {
    throw ValidationError(std::vector<FieldError>{{"$", "configuration must be a JSON object"}});
  }
  for (auto it = raw.begin(); it != raw.end(); ++it) {
    const std::string& k = it.key();
    if (is_section_key(k) || training_schema().find(k) || runtime_schema().find(k)) continue;
    errors.push_back({k, "unknown field"});
  }

  const MethodSpec* spec = nullptr;
  if (auto it = raw.find("method"); it == raw.end()) {
    errors.push_back({"method", "is required"});
  } else if (!it->is_string()) {
    errors.push_back({"method", "must be a string"});
  } else {
    try {
      spec = &registry.lookup(it->get<std::string>());
      cfg.method = spec->key;
      cfg.modality = spec->modality;
    } catch (const UnknownMethod& e) {
      errors.push_back({"method", "unknown method; available: " + join(e.available(), ", ")});
    }
  }

  if (auto it = raw.find("modality"); it != raw.end()) {
    std::optional<Modality> m;
    if (it->is_string()) m = parse_modality(it->get<std::string>());
    if (!m) {
      errors.push_back({"modality", "must be one of audio, vision, graph, crossmodal"});
    } else if (spec != nullptr && *m != spec->modality) {
      errors.push_back({"modality", "method '" + spec->key + "' belongs to modality '" +
                                        std::string(modality_name(spec->modality)) + "'"});
    }
  }

  if (auto it = raw.find("backbone"); it != raw.end()) {
    const std::string b = it->is_string() ? to_lower(it->get<std::string>()) : "";
    if (b != "default" && b != "user") {
      errors.push_back({"backbone", "must be one of default, user"});
    } else {
      cfg.backbone = b;
    }
  }

  if (spec != nullptr) {
    json mp = raw.contains("method_params") ? raw["method_params"] : json::object();
    cfg.method_params = spec->schema.validate(mp, "method_params", errors);
  }

  const json training = training_schema().validate(
      gather_section(raw, "training", training_schema(), errors), "training", errors);
  const json runtime = runtime_schema().validate(
      gather_section(raw, "runtime", runtime_schema(), errors), "runtime", errors);

  std::optional<json> eval;
  if (auto it = raw.find("eval_template"); it != raw.end() && !it->is_null()) {
    eval = eval_schema().validate(*it, "eval_template", errors);
  }

  if (!errors.empty()) throw ValidationError(std::move(errors));

  cfg.batch_size = training["batch_size"];
  cfg.epochs = training["epochs"];
  cfg.learning_rate = training["learning_rate"];
  cfg.weight_decay = training["weight_decay"];
  cfg.optimizer = *parse_optimizer(training["optimizer"].get<std::string>());
  cfg.use_hpo = training["use_hpo"];
  cfg.n_trials = training["n_trials"];
  cfg.tuning_epochs = training["tuning_epochs"];
  cfg.lr_schedule = training["lr_schedule"];

  cfg.use_data_parallel = runtime["use_data_parallel"];
  cfg.n_shards = runtime["n_shards"];
  cfg.mixed_precision = runtime["mixed_precision"];
  cfg.checkpoint_interval = runtime["checkpoint_interval"];
  cfg.reload_checkpoint = runtime["reload_checkpoint"];
  cfg.save_dir = runtime["save_dir"];
  const std::string tm = runtime["tracker_mode"];
  cfg.tracker_mode = tm == "off" ? TrackerMode::kOff
                     : tm == "remote" ? TrackerMode::kRemote
                                      : TrackerMode::kLocal;
  cfg.seed = runtime["seed"];
  cfg.embedding_logging = runtime["embedding_logging"];

  if (eval) {
    EvalTemplate e;
    e.num_classes = (*eval)["num_classes"];
    e.batch_size = (*eval)["batch_size"];
    e.lr = (*eval)["lr"];
    e.epochs = (*eval)["epochs"];
    e.freeze_backbone = (*eval)["freeze_backbone"];
    cfg.eval_template = e;
  }
  return cfg;
}

RunConfig parse_config_text(std::string_view text, const Registry& registry) {
  json raw;
  try {
    raw = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::vector<FieldError>{{"$", std::string("malformed JSON: ") + e.what()}});
  }
  return validate_config(raw, registry);
}

ordered_json config_to_json(const RunConfig& cfg) {
  // json (std::map-backed) sorts keys inside each section.
  json training = {{"batch_size", cfg.batch_size},
                   {"epochs", cfg.epochs},
                   {"learning_rate", cfg.learning_rate},
                   {"weight_decay", cfg.weight_decay},
                   {"optimizer", optimizer_name(cfg.optimizer)},
                   {"use_hpo", cfg.use_hpo},
                   {"n_trials", cfg.n_trials},
                   {"tuning_epochs", cfg.tuning_epochs},
                   {"lr_schedule", cfg.lr_schedule}};
  json runtime = {{"use_data_parallel", cfg.use_data_parallel},
                  {"n_shards", cfg.n_shards},
                  {"mixed_precision", cfg.mixed_precision},
                  {"checkpoint_interval", cfg.checkpoint_interval},
                  {"reload_checkpoint", cfg.reload_checkpoint},
                  {"save_dir", cfg.save_dir},
                  {"tracker_mode", tracker_mode_name(cfg.tracker_mode)},
                  {"seed", cfg.seed},
                  {"embedding_logging", cfg.embedding_logging}};
  ordered_json out;
  out["modality"] = modality_name(cfg.modality);
  out["method"] = cfg.method;
  out["backbone"] = cfg.backbone;
  out["method_params"] = ordered_json::parse(cfg.method_params.dump());
  out["training"] = ordered_json::parse(training.dump());
  out["runtime"] = ordered_json::parse(runtime.dump());
  if (cfg.eval_template) {
    const auto& e = *cfg.eval_template;
    json ev = {{"num_classes", e.num_classes},
               {"batch_size", e.batch_size},
               {"lr", e.lr},
               {"epochs", e.epochs},
               {"freeze_backbone", e.freeze_backbone}};
    out["eval_template"] = ordered_json::parse(ev.dump());
  } else {
    out["eval_template"] = nullptr;
  }
  return out;
}

std::string export_config(const RunConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

std::string config_hash(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.reload_checkpoint = false;
  return sha256_hex(export_config(c));
}

}  // namespace sslkit
