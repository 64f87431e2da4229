#pragma once

// Append-only run event log with an optional asynchronous remote mirror,
// embedding frames, artifact records and a terminal renderer.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sslkit/config.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit {

struct RunNotOpen : std::logic_error {
  using std::logic_error::logic_error;
};
struct MissingFile : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TooFewPoints : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr const char* kEventKinds[] = {"batch_loss", "epoch_loss",      "val_loss",
                                              "system",     "embedding_frame", "artifact",
                                              "config",     "summary",         "warning"};
bool is_event_kind(std::string_view kind);

/// Receives every event after it is written locally. May throw; failures are
/// turned into local warning events.
using RemoteHook = std::function<void(const ordered_json& event)>;
/// Synchronous observer on the writer thread (terminal output, tests).
using EventListener = std::function<void(const ordered_json& event)>;

class Tracker {
 public:
  /// Opens {run_dir}/events.jsonl. With `append` the existing log is kept and
  /// the sequence number continues from its last line. TrackerMode::kOff
  /// keeps events in memory only.
  Tracker(std::filesystem::path run_dir, std::string run_id, TrackerMode mode,
          RemoteHook remote = {}, bool append = false);
  ~Tracker();
  Tracker(const Tracker&) = delete;
  Tracker& operator=(const Tracker&) = delete;

  const std::string& run_id() const { return run_id_; }
  const std::filesystem::path& run_dir() const { return dir_; }
  std::filesystem::path events_path() const { return dir_ / "events.jsonl"; }
  bool is_open() const { return open_; }

  /// Appends {run_id, seq, ts, kind, payload}; returns the written event.
  ordered_json log_event(std::string_view kind, ordered_json payload);
  /// Projects embeddings [N, D] to `dim` coordinates and logs a frame.
  ordered_json log_embedding_frame(const NdArray& embeddings, std::span<const std::int64_t> labels,
                                   std::int64_t epoch, std::size_t dim = 2);
  /// Records the file's SHA-256 and size.
  ordered_json register_artifact(const std::filesystem::path& path, std::string_view kind);

  void add_listener(EventListener l);
  /// Samples process statistics every `period` on a background thread.
  void start_system_sampler(std::chrono::milliseconds period = std::chrono::seconds(10));
  void flush();
  /// Stops the sampler, drains the remote queue and closes the file.
  void close();

  std::uint64_t next_seq() const { return seq_; }

 private:
  ordered_json write_locked(std::string_view kind, ordered_json payload);
  void remote_loop();

  std::filesystem::path dir_;
  std::string run_id_;
  TrackerMode mode_;
  RemoteHook remote_;
  std::ofstream out_;
  std::mutex mu_;
  std::uint64_t seq_ = 0;
  double last_ts_ = 0.0;
  bool open_ = false;
  std::vector<EventListener> listeners_;

  std::thread remote_thread_;
  std::mutex rq_mu_;
  std::condition_variable rq_cv_;
  std::deque<ordered_json> rq_;
  bool rq_stop_ = false;

  std::thread sampler_;
  std::mutex sampler_mu_;
  std::condition_variable sampler_cv_;
  bool sampler_stop_ = false;
};

/// Every event of a JSONL file, in order. Blank trailing lines are ignored.
std::vector<ordered_json> read_events(const std::filesystem::path& path);

/// SHA-256 recorded by the last artifact event for `path` still matches.
bool verify_artifact(const std::vector<ordered_json>& events, const std::filesystem::path& path);

/// Best-effort process statistics: cpu_percent since the previous call,
/// rss_bytes, accelerator (always "none" here).
ordered_json sample_system_stats();

/// Self-contained HTML page animating the embedding frames of an event log.
void export_embedding_html(const std::vector<ordered_json>& events, const std::filesystem::path& out);

/// Renders events for a terminal: coloured severity tags, aligned columns,
/// an in-place progress line for batch events, a config table at run start
/// and a summary at run end.
class TerminalLogger {
 public:
  TerminalLogger(std::ostream& os, bool color);
  /// Text for one event (may be empty for events that are not shown).
  std::string format(const ordered_json& event);
  void operator()(const ordered_json& event);

 private:
  std::ostream& os_;
  bool color_;
  bool progress_open_ = false;
};

}  // namespace sslkit
