#include "scinet/model_config.hpp"

#include <set>

#include "scinet/errors.hpp"

namespace scinet {

std::string to_string(Stage5Mode mode) { return mode == Stage5Mode::Strided ? "strided" : "dilated-r2"; }

std::string to_string(PyramidKind kind) {
  switch (kind) {
    case PyramidKind::None: return "none";
    case PyramidKind::Aspp: return "aspp";
    case PyramidKind::DenseAspp: return "dense-aspp";
  }
  return "?";
}

Stage5Mode parse_stage5_mode(const std::string& text) {
  if (text == "strided") return Stage5Mode::Strided;
  if (text == "dilated-r2") return Stage5Mode::DilatedR2;
  throw ConfigError("stage5 mode must be 'strided' or 'dilated-r2', got '" + text + "'");
}

PyramidKind parse_pyramid_kind(const std::string& text) {
  if (text == "none") return PyramidKind::None;
  if (text == "aspp") return PyramidKind::Aspp;
  if (text == "dense-aspp") return PyramidKind::DenseAspp;
  throw ConfigError("pyramid must be 'none', 'aspp' or 'dense-aspp', got '" + text + "'");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.stage_widths = {48, 120, 336, 888, 888};
  c.stage_blocks = {1, 2, 2, 2, 2};
  c.rates = {3, 6, 12, 18};
  c.branch_channels = 256;
  c.decoder_widths = {256, 128, 64, 32};
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.stage_widths = {8, 16, 32, 48, 64};
  c.stage_blocks = {1, 1, 1, 2, 2};
  c.rates = {3, 6, 12, 18};
  c.branch_channels = 16;
  c.decoder_widths = {32, 24, 16, 16};
  return c;
}

ModelConfig ModelConfig::ablation_baseline() const {
  ModelConfig c = *this;
  c.stage5 = Stage5Mode::Strided;
  c.pyramid = PyramidKind::None;
  return c;
}

ModelConfig model_preset(const std::string& name) {
  if (name == "desk") return ModelConfig::desk();
  if (name == "paper") return ModelConfig::paper();
  if (name == "tiny") return ModelConfig::tiny();
  throw ConfigError("unknown model preset '" + name + "' (expected desk, paper or tiny)");
}

std::size_t ModelConfig::pyramid_out_channels() const {
  return pyramid == PyramidKind::None ? stage_widths[4] : decoder_widths[0];
}

void ModelConfig::validate() const {
  if (in_channels == 0) throw ConfigError("model.in_channels must be positive");
  for (std::size_t s = 0; s < 5; ++s) {
    if (stage_widths[s] == 0) throw ConfigError("model.stage_widths[" + std::to_string(s) + "] must be positive");
    if (stage_blocks[s] == 0) throw ConfigError("model.stage_blocks[" + std::to_string(s) + "] must be positive");
  }
  for (std::size_t d = 0; d < 4; ++d)
    if (decoder_widths[d] == 0) throw ConfigError("model.decoder_widths[" + std::to_string(d) + "] must be positive");
  if (head_channels != 1) throw ConfigError("model.head_channels must be 1 (binary segmentation)");
  if (pyramid != PyramidKind::None) {
    if (rates.empty()) throw ConfigError("model.rates must be non-empty when a pyramid is configured");
    for (int r : rates)
      if (r < 1) throw ConfigError("model.rates entries must be >= 1, got " + std::to_string(r));
    if (branch_channels == 0) throw ConfigError("model.branch_channels must be positive");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"in_channels", in_channels},
          {"stage_widths", stage_widths},
          {"stage_blocks", stage_blocks},
          {"stage5", to_string(stage5)},
          {"pyramid", to_string(pyramid)},
          {"rates", rates},
          {"branch_channels", branch_channels},
          {"decoder_widths", decoder_widths},
          {"head_channels", head_channels}};
}

namespace {

template <typename V>
void read_key(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model.") + key + ": " + e.what());
  }
}

}  // namespace

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known = {"preset",        "in_channels", "stage_widths",
                                              "stage_blocks",  "stage5",      "pyramid",
                                              "rates",         "branch_channels", "decoder_widths",
                                              "head_channels"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");

  ModelConfig c = j.contains("preset") ? model_preset(j.at("preset").get<std::string>()) : ModelConfig{};
  read_key(j, "in_channels", c.in_channels);
  read_key(j, "stage_widths", c.stage_widths);
  read_key(j, "stage_blocks", c.stage_blocks);
  std::string text;
  if (j.contains("stage5")) {
    read_key(j, "stage5", text);
    c.stage5 = parse_stage5_mode(text);
  }
  if (j.contains("pyramid")) {
    read_key(j, "pyramid", text);
    c.pyramid = parse_pyramid_kind(text);
    // the parallel pyramid's customary rates, unless given explicitly
    if (c.pyramid == PyramidKind::Aspp && !j.contains("rates")) c.rates = {8, 12, 18};
  }
  read_key(j, "rates", c.rates);
  read_key(j, "branch_channels", c.branch_channels);
  read_key(j, "decoder_widths", c.decoder_widths);
  read_key(j, "head_channels", c.head_channels);
  c.validate();
  return c;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t hash) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::uint64_t ModelConfig::digest() const {
  const std::string text = to_json().dump();
  return fnv1a(text.data(), text.size());
}

}  // namespace scinet
