#include "sslkit/tracking.hpp"

#include <unistd.h>

#include <algorithm>
#include <sstream>

#include <fmt/format.h>

#include "sslkit/evaluation.hpp"
#include "sslkit/hash.hpp"

namespace sslkit {

namespace {

double wall_seconds() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

}  // namespace

bool is_event_kind(std::string_view kind) {
  return std::find(std::begin(kEventKinds), std::end(kEventKinds), kind) != std::end(kEventKinds);
}

Tracker::Tracker(std::filesystem::path run_dir, std::string run_id, TrackerMode mode,
                 RemoteHook remote, bool append)
    : dir_(std::move(run_dir)), run_id_(std::move(run_id)), mode_(mode), remote_(std::move(remote)) {
  if (mode_ != TrackerMode::kOff) {
    std::filesystem::create_directories(dir_);
    if (append && std::filesystem::exists(events_path())) {
      const auto prior = read_events(events_path());
      if (!prior.empty()) {
        seq_ = prior.back().at("seq").get<std::uint64_t>() + 1;
        last_ts_ = prior.back().at("ts").get<double>();
      }
      out_.open(events_path(), std::ios::app);
    } else {
      out_.open(events_path(), std::ios::trunc);
    }
    if (!out_) throw std::runtime_error("cannot open " + events_path().string());
  }
  open_ = true;
  if (mode_ == TrackerMode::kRemote && remote_) remote_thread_ = std::thread([this] { remote_loop(); });
}

Tracker::~Tracker() {
  try {
    close();
  } catch (...) {
  }
}

void Tracker::add_listener(EventListener l) {
  std::lock_guard lock(mu_);
  listeners_.push_back(std::move(l));
}

ordered_json Tracker::log_event(std::string_view kind, ordered_json payload) {
  std::lock_guard lock(mu_);
  return write_locked(kind, std::move(payload));
}

ordered_json Tracker::write_locked(std::string_view kind, ordered_json payload) {
  if (!open_) throw RunNotOpen("run " + run_id_ + " is not open");
  if (!is_event_kind(kind)) throw std::invalid_argument("unknown event kind '" + std::string(kind) + "'");
  last_ts_ = std::max(last_ts_, wall_seconds());
  ordered_json ev;
  ev["run_id"] = run_id_;
  ev["seq"] = seq_++;
  ev["ts"] = last_ts_;
  ev["kind"] = kind;
  ev["payload"] = std::move(payload);
  if (out_.is_open()) {
    out_ << ev.dump() << '\n';
    out_.flush();  // readers tail the file line by line
  }
  for (auto& l : listeners_) l(ev);
  const bool from_remote = kind == "warning" && ev["payload"].value("source", "") == "remote";
  if (remote_thread_.joinable() && !from_remote) {
    std::lock_guard rl(rq_mu_);
    rq_.push_back(ev);
    rq_cv_.notify_one();
  }
  return ev;
}

void Tracker::remote_loop() {
  for (;;) {
    ordered_json ev;
    {
      std::unique_lock rl(rq_mu_);
      rq_cv_.wait(rl, [&] { return rq_stop_ || !rq_.empty(); });
      if (rq_.empty()) return;
      ev = std::move(rq_.front());
      rq_.pop_front();
    }
    std::string error;
    try {
      remote_(ev);
    } catch (const std::exception& e) {
      error = e.what();
    } catch (...) {
      error = "unknown error";
    }
    if (!error.empty()) {
      std::lock_guard lock(mu_);
      if (open_) {
        write_locked("warning", {{"source", "remote"},
                                 {"message", "remote tracker hook failed: " + error},
                                 {"event_seq", ev["seq"]}});
      }
    }
  }
}

ordered_json Tracker::log_embedding_frame(const NdArray& embeddings,
                                          std::span<const std::int64_t> labels, std::int64_t epoch,
                                          std::size_t dim) {
  if (embeddings.rank() != 2 || embeddings.dim(0) < 3) {
    throw TooFewPoints("an embedding frame needs at least 3 points");
  }
  if (labels.size() != embeddings.dim(0)) throw std::invalid_argument("one label per embedding row");
  const NdArray pts = project_embeddings(embeddings, dim, "pca");
  ordered_json points = ordered_json::array();
  for (std::size_t i = 0; i < pts.dim(0); ++i) {
    ordered_json row = ordered_json::array();
    for (std::size_t k = 0; k < dim; ++k) row.push_back(pts.data[i * dim + k]);
    points.push_back(std::move(row));
  }
  ordered_json payload;
  payload["epoch"] = epoch;
  payload["projector"] = "pca";
  payload["dim"] = dim;
  payload["points"] = std::move(points);
  payload["labels"] = std::vector<std::int64_t>(labels.begin(), labels.end());
  return log_event("embedding_frame", std::move(payload));
}

ordered_json Tracker::register_artifact(const std::filesystem::path& path, std::string_view kind) {
  if (kind != "checkpoint" && kind != "config" && kind != "report") {
    throw std::invalid_argument("artifact kind must be checkpoint, config or report");
  }
  if (!std::filesystem::is_regular_file(path)) throw MissingFile("no such file: " + path.string());
  ordered_json payload;
  payload["path"] = path.string();
  payload["kind"] = kind;
  payload["sha256"] = sha256_file(path);
  payload["size"] = std::filesystem::file_size(path);
  return log_event("artifact", std::move(payload));
}

void Tracker::start_system_sampler(std::chrono::milliseconds period) {
  if (sampler_.joinable()) return;
  sample_system_stats();  // prime the CPU counter
  sampler_ = std::thread([this, period] {
    std::unique_lock lock(sampler_mu_);
    while (!sampler_cv_.wait_for(lock, period, [&] { return sampler_stop_; })) {
      try {
        log_event("system", sample_system_stats());
      } catch (const RunNotOpen&) {
        return;
      }
    }
  });
}

void Tracker::flush() {
  std::lock_guard lock(mu_);
  if (out_.is_open()) out_.flush();
}

void Tracker::close() {
  if (sampler_.joinable()) {
    {
      std::lock_guard l(sampler_mu_);
      sampler_stop_ = true;
    }
    sampler_cv_.notify_all();
    sampler_.join();
  }
  if (remote_thread_.joinable()) {
    {
      std::lock_guard l(rq_mu_);
      rq_stop_ = true;
    }
    rq_cv_.notify_all();
    remote_thread_.join();
  }
  std::lock_guard lock(mu_);
  if (!open_) return;
  open_ = false;
  if (out_.is_open()) out_.close();
}

std::vector<ordered_json> read_events(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingFile("no event log at " + path.string());
  std::vector<ordered_json> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(ordered_json::parse(line));
  }
  return out;
}

bool verify_artifact(const std::vector<ordered_json>& events, const std::filesystem::path& path) {
  std::string recorded;
  for (const auto& e : events) {
    if (e.at("kind") == "artifact" && e.at("payload").at("path") == path.string()) {
      recorded = e.at("payload").at("sha256").get<std::string>();
    }
  }
  if (recorded.empty() || !std::filesystem::is_regular_file(path)) return false;
  return sha256_file(path) == recorded;
}

ordered_json sample_system_stats() {
  static std::mutex mu;
  static double last_cpu = -1.0, last_wall = 0.0;
  std::lock_guard lock(mu);
  ordered_json s;
  double cpu_percent = 0.0;
  std::ifstream stat("/proc/self/stat");
  std::string content((std::istreambuf_iterator<char>(stat)), std::istreambuf_iterator<char>());
  const auto close_paren = content.rfind(')');
  if (close_paren != std::string::npos) {
    std::istringstream rest(content.substr(close_paren + 2));
    std::vector<std::string> fields;
    for (std::string tok; rest >> tok;) fields.push_back(tok);
    // After the command name: state is field 0, utime 11, stime 12.
    if (fields.size() > 12) {
      const double ticks = static_cast<double>(sysconf(_SC_CLK_TCK));
      const double cpu = (std::stod(fields[11]) + std::stod(fields[12])) / ticks;
      const double now = wall_seconds();
      if (last_cpu >= 0.0 && now > last_wall) cpu_percent = 100.0 * (cpu - last_cpu) / (now - last_wall);
      last_cpu = cpu;
      last_wall = now;
    }
  }
  std::size_t rss = 0;
  std::ifstream statm("/proc/self/statm");
  std::size_t pages_total = 0, pages_rss = 0;
  if (statm >> pages_total >> pages_rss) rss = pages_rss * static_cast<std::size_t>(sysconf(_SC_PAGESIZE));
  s["cpu_percent"] = cpu_percent;
  s["rss_bytes"] = rss;
  s["accelerator"] = "none";
  return s;
}

void export_embedding_html(const std::vector<ordered_json>& events, const std::filesystem::path& out) {
  ordered_json frames = ordered_json::array();
  for (const auto& e : events) {
    if (e.at("kind") == "embedding_frame") frames.push_back(e.at("payload"));
  }
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out.string());
  f << R"(<!doctype html>
<html><head><meta charset="utf-8"><title>Embedding frames</title>
<style>body{font-family:sans-serif;background:#111;color:#ddd}canvas{background:#1b1b1b}</style>
</head><body><h3 id="title"></h3><canvas id="c" width="640" height="640"></canvas>
<script>
const frames = )" << frames.dump() << R"(;
const colors = ["#4e79a7","#f28e2b","#e15759","#76b7b2","#59a14f","#edc948","#b07aa1","#ff9da7"];
const c = document.getElementById("c"), g = c.getContext("2d");
let i = 0;
function draw() {
  if (!frames.length) return;
  const fr = frames[i % frames.length];
  const xs = fr.points.map(p => p[0]), ys = fr.points.map(p => p[1]);
  const lo = [Math.min(...xs), Math.min(...ys)], hi = [Math.max(...xs), Math.max(...ys)];
  const sx = v => 20 + 600 * (v - lo[0]) / ((hi[0] - lo[0]) || 1);
  const sy = v => 620 - 600 * (v - lo[1]) / ((hi[1] - lo[1]) || 1);
  g.clearRect(0, 0, 640, 640);
  fr.points.forEach((p, k) => {
    g.fillStyle = colors[fr.labels[k] % colors.length];
    g.beginPath(); g.arc(sx(p[0]), sy(p[1]), 3, 0, 6.2832); g.fill();
  });
  document.getElementById("title").textContent = "epoch " + fr.epoch;
  i++;
}
draw(); setInterval(draw, 800);
</script></body></html>
)";
}

// ---------------------------------------------------------------------------

TerminalLogger::TerminalLogger(std::ostream& os, bool color) : os_(os), color_(color) {}

std::string TerminalLogger::format(const ordered_json& ev) {
  auto tag = [&](std::string_view level, std::string_view code) {
    std::string t = fmt::format("[{:<5}]", level);
    return color_ ? fmt::format("\x1b[{}m{}\x1b[0m", code, t) : t;
  };
  const std::string kind = ev.at("kind").get<std::string>();
  const ordered_json& p = ev.at("payload");
  std::string out;
  auto line = [&](const std::string& text) {
    if (progress_open_) {
      out += '\n';
      progress_open_ = false;
    }
    out += text;
    out += '\n';
  };
  if (kind == "config") {
    line(fmt::format("{} run {} started", tag("INFO", "32"), ev.at("run_id").get<std::string>()));
    auto row = [&](const std::string& k, const ordered_json& v) {
      line(fmt::format("        {:<22} {}", k, v.is_string() ? v.get<std::string>() : v.dump()));
    };
    for (const auto& [k, v] : p.items()) {
      if (v.is_object() && !v.empty()) {
        for (const auto& [k2, v2] : v.items()) row(k + "." + k2, v2);
      } else {
        row(k, v);
      }
    }
  } else if (kind == "batch_loss") {
    out = fmt::format("\r{} epoch {:>4} step {:>6} loss {:.4f}", tag("STEP", "36"),
                      p.value("epoch", 0), p.value("step", 0), p.value("total", 0.0));
    progress_open_ = true;
  } else if (kind == "epoch_loss") {
    line(fmt::format("{} epoch {:>4} loss {:.4f}", tag("INFO", "32"), p.value("epoch", 0),
                     p.value("total", 0.0)));
  } else if (kind == "val_loss") {
    line(fmt::format("{} epoch {:>4} val   {:.4f}", tag("INFO", "32"), p.value("epoch", 0),
                     p.value("total", 0.0)));
  } else if (kind == "warning") {
    line(fmt::format("{} {}", tag("WARN", "33"), p.value("message", std::string())));
  } else if (kind == "artifact") {
    line(fmt::format("{} saved {:<10} {} ({} bytes)", tag("INFO", "32"), p.value("kind", std::string()),
                     p.value("path", std::string()), p.value("size", std::size_t{0})));
  } else if (kind == "summary") {
    const std::string status = p.value("status", std::string("finished"));
    const bool ok = status == "finished";
    line(fmt::format("{} run {}: wall time {:.2f} s, best loss {:.4f}, final loss {:.4f}, {} epochs",
                     ok ? tag("INFO", "32") : tag("ERROR", "31"), status, p.value("wall_time_s", 0.0),
                     p.value("best_loss", 0.0), p.value("final_loss", 0.0),
                     p.value("epochs_completed", 0)));
  } else if (kind == "system") {
    line(fmt::format("{} cpu {:.1f}% rss {:.1f} MiB", tag("DEBUG", "2"), p.value("cpu_percent", 0.0),
                     static_cast<double>(p.value("rss_bytes", std::size_t{0})) / 1048576.0));
  } else if (kind == "embedding_frame") {
    line(fmt::format("{} embedding frame epoch {} ({} points)", tag("DEBUG", "2"), p.value("epoch", 0),
                     p.contains("points") ? p.at("points").size() : 0));
  }
  return out;
}

void TerminalLogger::operator()(const ordered_json& event) {
  os_ << format(event);
  os_.flush();
}

}  // namespace sslkit
