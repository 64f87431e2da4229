#pragma once

// Versioned binary container of named arrays behind a JSON header.
//
// Layout: "SSLCKPT\0", u32 version, u64 header length, header JSON, then the
// arrays as little-endian doubles in header order. The header records the
// SHA-256 of the payload bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "sslkit/config.hpp"
#include "sslkit/tensor.hpp"

namespace sslkit {

struct CorruptCheckpoint : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointData {
  std::string config_text;
  std::string config_hash;
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  /// Free-form state: RNG strings, loss history, scaler state.
  json meta = json::object();
  std::map<std::string, NdArray> arrays;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes atomically (temporary file then rename).
void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
/// CorruptCheckpoint on a bad magic, unsupported version, truncation, header
/// parse failure or payload hash mismatch.
CheckpointData load_checkpoint(const std::filesystem::path& path);

}  // namespace sslkit
