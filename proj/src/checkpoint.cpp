#include "sslkit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sslkit/hash.hpp"

namespace sslkit {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'L', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CorruptCheckpoint("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  std::string payload;
  json arrays = json::array();
  for (const auto& [name, arr] : data.arrays) {
    if (shape_numel(arr.shape) != arr.data.size()) {
      throw std::invalid_argument("checkpoint array '" + name + "' has inconsistent shape");
    }
    arrays.push_back({{"name", name}, {"shape", arr.shape}});
    payload.append(reinterpret_cast<const char*>(arr.data.data()), arr.data.size() * sizeof(double));
  }
  json header = {{"config", data.config_text},
                 {"config_hash", data.config_hash},
                 {"epoch", data.epoch},
                 {"step", data.step},
                 {"meta", data.meta},
                 {"arrays", arrays},
                 {"payload_bytes", payload.size()},
                 {"payload_sha256", sha256_hex(payload)}};
  const std::string htext = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, htext.size());
  out += htext;
  out += payload;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string in = ss.str();
  if (in.size() < sizeof(kMagic) || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptCheckpoint("not a checkpoint file: " + path.string());
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion) {
    throw CorruptCheckpoint("unsupported checkpoint version " + std::to_string(version));
  }
  const auto hlen = take<std::uint64_t>(in, pos);
  if (hlen > in.size() - pos) throw CorruptCheckpoint("checkpoint truncated in header");
  json header;
  try {
    header = json::parse(in.substr(pos, hlen));
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint header unreadable: ") + e.what());
  }
  pos += hlen;
  const std::string payload = in.substr(pos);
  try {
    if (payload.size() != header.at("payload_bytes").get<std::size_t>()) {
      throw CorruptCheckpoint("checkpoint payload truncated");
    }
    if (sha256_hex(payload) != header.at("payload_sha256").get<std::string>()) {
      throw CorruptCheckpoint("checkpoint payload hash mismatch");
    }
    CheckpointData d;
    d.config_text = header.at("config").get<std::string>();
    d.config_hash = header.at("config_hash").get<std::string>();
    d.epoch = header.at("epoch").get<std::int64_t>();
    d.step = header.at("step").get<std::int64_t>();
    d.meta = header.at("meta");
    std::size_t off = 0;
    for (const auto& a : header.at("arrays")) {
      Shape shape = a.at("shape").get<Shape>();
      const std::size_t n = shape_numel(shape);
      if (off + n * sizeof(double) > payload.size()) throw CorruptCheckpoint("array table overruns payload");
      std::vector<double> v(n);
      std::memcpy(v.data(), payload.data() + off, n * sizeof(double));
      off += n * sizeof(double);
      d.arrays.emplace(a.at("name").get<std::string>(), NdArray(std::move(shape), std::move(v)));
    }
    return d;
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint header malformed: ") + e.what());
  }
}

}  // namespace sslkit
