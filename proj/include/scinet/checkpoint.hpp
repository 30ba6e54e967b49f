#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "scinet/model.hpp"

namespace scinet {

/// A named float32 array as stored in a checkpoint.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// In-memory image of a checkpoint file.
///
/// File layout (all integers little-endian):
///   "SCINETCK"                         8-byte magic
///   u32 format version                 (kCheckpointVersion)
///   u64 config digest                  FNV-1a of the canonical config JSON
///   u32 length, bytes                  canonical model config JSON
///   f64 best metric, i64 best epoch
///   u32 count, then per array:         parameters followed by buffers
///     u16 name length, name bytes
///     u8 element type (1 = float32), u8 rank (4), 4 x u64 dims (n, c, h, w)
///     numel x 4 bytes                  row-major payload
///   u8 has-optimizer flag; if set: u64 step, u32 count, arrays as above
///   u64 FNV-1a of every preceding byte
struct Checkpoint {
  ModelConfig config;
  double best_metric = std::numeric_limits<double>::quiet_NaN();
  std::int64_t best_epoch = -1;
  std::vector<NamedArray> arrays;
  bool has_optimizer = false;
  std::uint64_t optimizer_step = 0;
  std::vector<NamedArray> optimizer;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Copies the model's parameters and buffers.
Checkpoint capture(Model<float>& model);
/// Overwrites the model's parameters and buffers. Throws CheckpointError
/// naming the first parameter whose name or shape differs, or the config keys
/// that differ when all arrays agree.
void restore(Model<float>& model, const Checkpoint& checkpoint);

std::string serialize(const Checkpoint& checkpoint);
/// Throws CheckpointError on bad magic, version, checksum or truncation.
Checkpoint deserialize(const std::string& bytes);

/// Written to a temporary sibling and renamed, so readers never see a partial file.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

void save_checkpoint(Model<float>& model, const std::filesystem::path& path);
/// Builds a model for `config` and loads the file into it.
std::unique_ptr<Model<float>> load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);
/// Uses the config stored in the file.
std::unique_ptr<Model<float>> load_checkpoint(const std::filesystem::path& path);

}  // namespace scinet
