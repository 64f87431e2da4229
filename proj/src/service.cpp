#include "sslkit/service.hpp"

#include <fmt/format.h>
#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <random>

#include "sslkit/methods.hpp"
#include "sslkit/trainer.hpp"

namespace sslkit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Recipes

namespace {

const char* generator_for(Modality m) {
  switch (m) {
    case Modality::kVision: return "shapes";
    case Modality::kAudio: return "tones";
    case Modality::kGraph: return "graphs";
    case Modality::kCrossmodal: return "pairs";
  }
  return "shapes";
}

std::optional<Modality> generator_modality(const std::string& g) {
  if (g == "shapes") return Modality::kVision;
  if (g == "tones") return Modality::kAudio;
  if (g == "graphs") return Modality::kGraph;
  if (g == "pairs") return Modality::kCrossmodal;
  return std::nullopt;
}

std::size_t default_count(const std::string& g) {
  if (g == "shapes") return ShapesOptions{}.count;
  if (g == "tones") return TonesOptions{}.count;
  if (g == "graphs") return GraphsOptions{}.count;
  return PairsOptions{}.count;
}

}  // namespace

DatasetRecipe DatasetRecipe::from_json(const json& j) {
  if (!j.is_object()) throw RecipeError("dataset recipe must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "name" && it.key() != "generator" && it.key() != "params" && it.key() != "path")
      throw RecipeError("unknown recipe field '" + it.key() + "'");
  DatasetRecipe r;
  r.name = j.value("name", std::string());
  r.generator = j.value("generator", std::string());
  if (j.contains("params")) {
    if (!j.at("params").is_object()) throw RecipeError("recipe params must be an object");
    r.params = j.at("params");
  }
  if (j.contains("path")) r.path = j.at("path").get<std::string>();
  if (r.path.has_value() == !r.generator.empty())
    throw RecipeError("a recipe names either a generator or a manifest path");
  if (!r.path && !generator_modality(r.generator))
    throw RecipeError("unknown generator '" + r.generator + "' (shapes, tones, graphs, pairs)");
  if (r.name.empty()) r.name = r.path ? r.path->filename().string() : r.generator;
  return r;
}

DatasetRecipe DatasetRecipe::default_for(Modality m) {
  DatasetRecipe r;
  r.generator = generator_for(m);
  r.name = r.generator;
  return r;
}

json DatasetRecipe::to_json() const {
  json j = {{"name", name}};
  if (path) {
    j["path"] = path->string();
  } else {
    j["generator"] = generator;
    j["params"] = params;
  }
  return j;
}

InMemoryDataset DatasetRecipe::resolve() const {
  try {
    return path ? read_dataset(*path) : make_synthetic(generator, params);
  } catch (const json::exception& e) {
    throw RecipeError(std::string("recipe '") + name + "': " + e.what());
  } catch (const DataError& e) {
    throw RecipeError(std::string("recipe '") + name + "': " + e.what());
  }
}

DatasetRecipe DatasetRecipe::held_out() const {
  DatasetRecipe r = *this;
  if (!path) r.params["seed"] = params.value("seed", std::uint64_t{0}) + 0x7E57;
  r.name = name + "-heldout";
  return r;
}

std::pair<Modality, std::size_t> DatasetRecipe::describe() const {
  if (path) {
    std::ifstream in(*path / "manifest.json");
    if (!in) throw RecipeError("missing manifest.json in " + path->string());
    const json m = json::parse(in, nullptr, false);
    if (m.is_discarded()) throw RecipeError("unreadable manifest in " + path->string());
    const auto mod = parse_modality(m.value("modality", std::string()));
    if (!mod) throw RecipeError("manifest has an unknown modality");
    return {*mod, m.value("count", std::size_t{0})};
  }
  return {*generator_modality(generator), params.value("count", default_count(generator))};
}

std::string effective_save_dir(const RunConfig& cfg) {
  const char* home = std::getenv("PRISMSSL_HOME");
  if (home && *home && cfg.save_dir == RunConfig{}.save_dir) return home;
  return cfg.save_dir;
}

// ---------------------------------------------------------------------------
// Preview

namespace {

struct Submission {
  json config;
  std::optional<json> dataset;
  std::string kind = "pretext";
};

Submission split_body(const json& body) {
  if (!body.is_object()) throw std::invalid_argument("request body must be a JSON object");
  Submission s;
  if (body.contains("config") && !body.contains("method") && !body.contains("modality")) {
    for (auto it = body.begin(); it != body.end(); ++it)
      if (it.key() != "config" && it.key() != "dataset" && it.key() != "kind")
        throw ValidationError({{it.key(), "unknown field"}});
    s.config = body.at("config");
    if (body.contains("dataset")) s.dataset = body.at("dataset");
    s.kind = body.value("kind", s.kind);
  } else {
    s.config = body;
  }
  return s;
}

std::string run_sheet(const RunConfig& cfg, std::optional<std::size_t> steps, const DatasetRecipe& r) {
  std::string out;
  auto line = [&](std::string_view k, const std::string& v) { out += fmt::format("{:<18}{}\n", k, v); };
  line("method", cfg.method);
  line("modality", std::string(modality_name(cfg.modality)));
  line("backbone", cfg.backbone + " (" + cfg.method_params.value("backbone_arch", "default") + ")");
  line("optimizer", std::string(optimizer_name(cfg.optimizer)));
  line("learning_rate", fmt::format("{}", cfg.learning_rate));
  line("weight_decay", fmt::format("{}", cfg.weight_decay));
  line("batch_size", std::to_string(cfg.batch_size));
  line("epochs", std::to_string(cfg.epochs));
  line("lr_schedule", cfg.lr_schedule);
  line("hpo", cfg.use_hpo ? fmt::format("{} trials x {} epochs", cfg.n_trials, cfg.tuning_epochs) : "off");
  line("data_parallel", cfg.use_data_parallel ? fmt::format("{} shards", cfg.n_shards) : "off");
  line("mixed_precision", cfg.mixed_precision ? "on" : "off");
  line("dataset", r.name);
  line("steps_per_epoch", steps ? std::to_string(*steps) : "unknown");
  return out;
}

}  // namespace

json preview_config(const json& body) {
  const Submission s = split_body(body);
  const RunConfig cfg = validate_config(s.config);
  const DatasetRecipe recipe =
      s.dataset ? DatasetRecipe::from_json(*s.dataset) : DatasetRecipe::default_for(cfg.modality);
  std::optional<std::size_t> steps;
  std::vector<std::string> warnings;
  try {
    const auto [mod, n] = recipe.describe();
    if (mod != cfg.modality)
      warnings.push_back(fmt::format("dataset modality {} differs from config modality {}",
                                     modality_name(mod), modality_name(cfg.modality)));
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    steps = (n + bs - 1) / bs;
  } catch (const RecipeError& e) {
    warnings.push_back(e.what());
  }
  json j;
  j["config"] = json::parse(config_to_json(cfg).dump());
  j["config_text"] = export_config(cfg);
  j["config_hash"] = config_hash(cfg);
  j["dataset"] = recipe.to_json();
  j["estimated_steps_per_epoch"] = steps ? json(*steps) : json(nullptr);
  j["run_sheet"] = run_sheet(cfg, steps, recipe);
  j["warnings"] = warnings;
  return j;
}

// ---------------------------------------------------------------------------
// Runs

std::string_view run_state_name(RunState s) {
  switch (s) {
    case RunState::kPending: return "pending";
    case RunState::kRunning: return "running";
    case RunState::kFinished: return "finished";
    case RunState::kFailed: return "failed";
    case RunState::kStopped: return "stopped";
  }
  return "?";
}

json RunHandle::to_json() const {
  json j = {{"run_id", run_id},          {"state", run_state_name(state)},
            {"config_hash", config_hash}, {"created_at", created_at},
            {"run_dir", run_dir.string()}, {"stop_requested", stop_requested}};
  if (!error.empty()) j["error"] = error;
  return j;
}

std::string make_uuid() {
  static std::mutex mu;
  static std::mt19937_64 gen(std::random_device{}() ^
                             static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count()));
  std::uint64_t hi, lo;
  {
    std::lock_guard lock(mu);
    hi = gen();
    lo = gen();
  }
  hi = (hi & 0xFFFFFFFFFFFF0FFFULL) | 0x0000000000004000ULL;  // version 4
  lo = (lo & 0x3FFFFFFFFFFFFFFFULL) | 0x8000000000000000ULL;  // RFC 4122 variant
  return fmt::format("{:08x}-{:04x}-{:04x}-{:04x}-{:012x}", hi >> 32, (hi >> 16) & 0xFFFF, hi & 0xFFFF,
                     lo >> 48, lo & 0xFFFFFFFFFFFFULL);
}

namespace {

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Reply error_reply(int status, const std::string& kind, const std::string& message) {
  return {status, {{"error", kind}, {"message", message}}};
}

bool terminal(RunState s) {
  return s == RunState::kFinished || s == RunState::kFailed || s == RunState::kStopped;
}

}  // namespace

RunService::RunService() = default;

RunService::~RunService() {
  {
    std::lock_guard lock(mu_);
    for (auto& [id, e] : runs_) e.stop->store(true);
  }
  if (worker_.joinable()) worker_.join();
}

Reply RunService::methods() const {
  json j = Registry::global().catalog_json();
  j["sections"] = section_schemas_json();
  return {200, j};
}

Reply RunService::preview(const std::string& body) const {
  const json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) return error_reply(400, "BadRequest", "body is not valid JSON");
  try {
    return {200, preview_config(j)};
  } catch (const ValidationError& e) {
    return {422, e.to_json()};
  } catch (const RecipeError& e) {
    return error_reply(422, "RecipeError", e.what());
  } catch (const std::invalid_argument& e) {
    return error_reply(400, "BadRequest", e.what());
  }
}

Reply RunService::submit(const std::string& body) {
  const json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) return error_reply(400, "BadRequest", "body is not valid JSON");
  Submission s;
  RunConfig cfg;
  DatasetRecipe recipe;
  try {
    s = split_body(j);
    if (s.kind != "pretext")
      return error_reply(400, "PretextOnly", "pretext only: runs started here are pretext training runs");
    cfg = validate_config(s.config);
    recipe = s.dataset ? DatasetRecipe::from_json(*s.dataset) : DatasetRecipe::default_for(cfg.modality);
  } catch (const ValidationError& e) {
    return {422, e.to_json()};
  } catch (const RecipeError& e) {
    return error_reply(422, "RecipeError", e.what());
  } catch (const std::invalid_argument& e) {
    return error_reply(400, "BadRequest", e.what());
  }
  cfg.save_dir = effective_save_dir(cfg);

  std::lock_guard lock(mu_);
  if (active_) return error_reply(409, "RunActive", "run " + *active_ + " is still active");
  // Resolved under the lock so a concurrent submit sees this one as active.
  InMemoryDataset data(cfg.modality, {});
  try {
    data = recipe.resolve();
  } catch (const RecipeError& e) {
    return error_reply(422, "RecipeError", e.what());
  }
  if (data.modality() != cfg.modality)
    return error_reply(422, "RecipeError", "dataset modality does not match the config");
  if (worker_.joinable()) worker_.join();

  Entry e;
  e.handle.run_id = make_uuid();
  e.handle.config_hash = config_hash(cfg);
  e.handle.created_at = utc_now();
  e.handle.run_dir = run_directory(cfg, e.handle.run_id);
  e.stop = std::make_shared<std::atomic<bool>>(false);
  const std::string id = e.handle.run_id;
  Reply r{202, e.handle.to_json()};
  runs_.emplace(id, std::move(e));
  order_.push_back(id);
  active_ = id;
  worker_ = std::thread(&RunService::run_thread, this, id, std::move(cfg), std::move(data));
  return r;
}

void RunService::run_thread(std::string id, RunConfig cfg, InMemoryDataset data) {
  TrainOptions opt;
  {
    std::lock_guard lock(mu_);
    auto& e = runs_.at(id);
    e.handle.state = RunState::kRunning;
    opt.stop = e.stop;
  }
  opt.run_id = id;
  RunState final_state = RunState::kFinished;
  std::string error;
  try {
    const TrainReport rep = Trainer(cfg, opt).train(data);
    final_state = rep.status == "stopped" ? RunState::kStopped : RunState::kFinished;
  } catch (const std::exception& ex) {
    final_state = RunState::kFailed;
    error = ex.what();
  }
  std::lock_guard lock(mu_);
  auto& e = runs_.at(id);
  e.handle.state = final_state;
  e.handle.error = error;
  active_.reset();
}

Reply RunService::list_runs() const {
  std::lock_guard lock(mu_);
  json arr = json::array();
  for (const auto& id : order_) arr.push_back(runs_.at(id).handle.to_json());
  return {200, {{"runs", arr}}};
}

Reply RunService::get_run(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = runs_.find(id);
  if (it == runs_.end()) return error_reply(404, "UnknownRun", "no run " + id);
  return {200, it->second.handle.to_json()};
}

Reply RunService::stop(const std::string& id) {
  std::lock_guard lock(mu_);
  const auto it = runs_.find(id);
  if (it == runs_.end()) return error_reply(404, "UnknownRun", "no run " + id);
  auto& e = it->second;
  if (terminal(e.handle.state))
    return error_reply(409, "NotRunning",
                       fmt::format("run {} is {}", id, run_state_name(e.handle.state)));
  e.stop->store(true);
  e.handle.stop_requested = true;
  return {200, e.handle.to_json()};
}

std::optional<RunHandle> RunService::handle(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = runs_.find(id);
  if (it == runs_.end()) return std::nullopt;
  return it->second.handle;
}

void RunService::wait_idle() {
  std::unique_lock lock(mu_);
  if (worker_.joinable()) {
    std::thread t = std::move(worker_);
    lock.unlock();
    t.join();
  }
}

// ---------------------------------------------------------------------------
// HTTP

std::string sse_frame(std::size_t offset, const std::string& line) {
  return fmt::format("id: {}\ndata: {}\n\n", offset, line);
}

namespace {

/// Incremental reader of complete lines of a file that is being appended to.
class LineTail {
 public:
  explicit LineTail(fs::path p) : path_(std::move(p)) {}
  /// Appends newly completed lines to `out`.
  void poll(std::vector<std::string>& out) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    in.seekg(pos_);
    std::string chunk((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t start = 0;
    for (std::size_t nl; (nl = chunk.find('\n', start)) != std::string::npos; start = nl + 1)
      out.push_back(chunk.substr(start, nl - start));
    pos_ += static_cast<std::streamoff>(start);
  }

 private:
  fs::path path_;
  std::streamoff pos_ = 0;
};

void send(httplib::Response& res, const Reply& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

}  // namespace

struct HttpServer::Impl {
  RunService& service;
  httplib::Server server;
  std::thread thread;
  explicit Impl(RunService& s) : service(s) {}
};

HttpServer::HttpServer(RunService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  RunService& svc = service;

  srv.Get("/api/methods", [&svc](const httplib::Request&, httplib::Response& res) {
    send(res, svc.methods());
  });
  srv.Post("/api/config/preview", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.preview(req.body));
  });
  srv.Get("/api/recipes", [](const httplib::Request&, httplib::Response& res) {
    json arr = json::array();
    for (Modality m : {Modality::kVision, Modality::kAudio, Modality::kGraph, Modality::kCrossmodal}) {
      json r = DatasetRecipe::default_for(m).to_json();
      r["modality"] = modality_name(m);
      arr.push_back(r);
    }
    send(res, {200, {{"recipes", arr}}});
  });
  srv.Post("/api/runs", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.submit(req.body));
  });
  srv.Get("/api/runs", [&svc](const httplib::Request&, httplib::Response& res) {
    send(res, svc.list_runs());
  });
  srv.Get(R"(/api/runs/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.get_run(req.matches[1]));
  });
  srv.Post(R"(/api/runs/([^/]+)/stop)", [&svc](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.stop(req.matches[1]));
  });
  srv.Get(R"(/api/runs/([^/]+)/events)", [&svc](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto h = svc.handle(id);
    if (!h) return send(res, error_reply(404, "UnknownRun", "no run " + id));
    std::size_t from = 0;
    try {
      if (req.has_param("from")) from = std::stoull(req.get_param_value("from"));
      else if (req.has_header("Last-Event-ID")) from = std::stoull(req.get_header_value("Last-Event-ID")) + 1;
    } catch (const std::exception&) {
      return send(res, error_reply(400, "BadRequest", "from must be a non-negative integer"));
    }
    auto tail = std::make_shared<LineTail>(h->run_dir / "events.jsonl");
    auto line_no = std::make_shared<std::size_t>(0);
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream",
        [&svc, id, from, tail, line_no](std::size_t, httplib::DataSink& sink) {
          for (;;) {
            if (!sink.is_writable()) return false;
            // Terminal state is read before polling so a final append is not missed.
            const auto h = svc.handle(id);
            const bool done = !h || terminal(h->state);
            std::vector<std::string> lines;
            tail->poll(lines);
            for (const auto& line : lines) {
              const std::size_t n = (*line_no)++;
              if (n < from) continue;
              const std::string frame = sse_frame(n, line);
              if (!sink.write(frame.data(), frame.size())) return false;
              const json ev = json::parse(line, nullptr, false);
              if (!ev.is_discarded() && ev.value("kind", "") == "summary") {
                sink.done();
                return true;
              }
            }
            if (done && lines.empty()) {
              sink.done();
              return true;
            }
            if (lines.empty()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
          }
        });
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  auto& srv = impl_->server;
  const int bound = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error(fmt::format("cannot bind {}:{}", host, port));
  impl_->thread = std::thread([&srv] { srv.listen_after_bind(); });
  srv.wait_until_ready();
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port))
    throw std::runtime_error(fmt::format("cannot listen on {}:{}", host, port));
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace sslkit
