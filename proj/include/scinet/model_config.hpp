#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace scinet {

enum class Stage5Mode { Strided, DilatedR2 };
enum class PyramidKind { None, Aspp, DenseAspp };

std::string to_string(Stage5Mode mode);
std::string to_string(PyramidKind kind);
Stage5Mode parse_stage5_mode(const std::string& text);
PyramidKind parse_pyramid_kind(const std::string& text);

/// Architecture description. Every stage starts with a stride-2 3x3 block
/// (stage 5: stride 1 with dilation 2 on all its blocks in DilatedR2 mode),
/// followed by stride-1 3x3 blocks.
struct ModelConfig {
  std::size_t in_channels = 3;
  std::array<std::size_t, 5> stage_widths{32, 64, 128, 256, 512};
  std::array<std::size_t, 5> stage_blocks{2, 2, 2, 2, 2};
  Stage5Mode stage5 = Stage5Mode::DilatedR2;
  PyramidKind pyramid = PyramidKind::DenseAspp;
  std::vector<int> rates{3, 6, 12, 18};
  std::size_t branch_channels = 64;
  std::array<std::size_t, 4> decoder_widths{256, 128, 64, 32};
  std::size_t head_channels = 1;

  /// Desk-scale defaults.
  static ModelConfig desk();
  /// Stage widths ending in 888 with a 4 x 256 dense pyramid; for shape checks.
  static ModelConfig paper();
  /// Small enough to train in minutes on one core.
  static ModelConfig tiny();
  /// Same encoder/decoder without a pyramid, output stride 32.
  ModelConfig ablation_baseline() const;

  std::size_t output_stride() const { return stage5 == Stage5Mode::Strided ? 32 : 16; }
  /// Width of the tensor handed to the decoder's first block.
  std::size_t pyramid_out_channels() const;

  /// Throws ConfigError describing the first inconsistency.
  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& j);
  /// FNV-1a over the canonical JSON text.
  std::uint64_t digest() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Named preset: "desk", "paper" or "tiny".
ModelConfig model_preset(const std::string& name);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t hash = 0xcbf29ce484222325ULL);

}  // namespace scinet
