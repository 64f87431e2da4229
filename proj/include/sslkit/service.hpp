#pragma once

// Run management behind the HTTP surface: dataset recipes, the single active
// run, previews and event-log streaming.

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "sslkit/config.hpp"
#include "sslkit/data.hpp"

namespace sslkit {

struct RecipeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Named synthetic generator with parameters, or a manifest directory.
struct DatasetRecipe {
  std::string name;
  std::string generator;  // shapes | tones | graphs | pairs; empty with path
  json params = json::object();
  std::optional<std::filesystem::path> path;

  static DatasetRecipe from_json(const json& j);
  /// Small generator matching a modality.
  static DatasetRecipe default_for(Modality m);
  json to_json() const;
  /// RecipeError when the generator, parameters or manifest are unusable.
  InMemoryDataset resolve() const;
  /// Same recipe with the generator seed shifted, for held-out data.
  DatasetRecipe held_out() const;
  /// Modality and sample count without generating anything.
  std::pair<Modality, std::size_t> describe() const;
};

/// save_dir with PRISMSSL_HOME substituted when the config keeps the default.
std::string effective_save_dir(const RunConfig& cfg);

/// Normalised config plus a run sheet; ValidationError on invalid input.
/// Accepts a bare config or {"config": ..., "dataset": recipe}.
json preview_config(const json& body);

enum class RunState { kPending, kRunning, kFinished, kFailed, kStopped };
std::string_view run_state_name(RunState s);

struct RunHandle {
  std::string run_id;
  RunState state = RunState::kPending;
  std::string config_hash;
  std::string created_at;
  std::filesystem::path run_dir;
  std::string error;
  bool stop_requested = false;
  json to_json() const;
};

std::string make_uuid();

struct Reply {
  int status = 200;
  json body;
};

/// Owns the run table and the background training thread. All methods are
/// safe to call concurrently.
class RunService {
 public:
  RunService();
  ~RunService();
  RunService(const RunService&) = delete;
  RunService& operator=(const RunService&) = delete;

  Reply methods() const;
  Reply preview(const std::string& body) const;
  /// {"config": ..., "dataset"?: recipe, "kind"?: "pretext"} or a bare config.
  Reply submit(const std::string& body);
  Reply list_runs() const;
  Reply get_run(const std::string& id) const;
  Reply stop(const std::string& id);

  std::optional<RunHandle> handle(const std::string& id) const;
  /// Blocks until no run is active.
  void wait_idle();

 private:
  struct Entry {
    RunHandle handle;
    std::shared_ptr<std::atomic<bool>> stop;
  };
  void run_thread(std::string id, RunConfig cfg, InMemoryDataset data);

  mutable std::mutex mu_;
  std::map<std::string, Entry> runs_;
  std::vector<std::string> order_;
  std::optional<std::string> active_;
  std::thread worker_;
};

/// Server-sent-event frame for line `offset` of an event log.
std::string sse_frame(std::size_t offset, const std::string& line);

/// HTTP front end on top of a RunService.
class HttpServer {
 public:
  explicit HttpServer(RunService& service);
  ~HttpServer();
  /// Binds and serves on a background thread; returns the bound port
  /// (pass 0 for an ephemeral port).
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sslkit
