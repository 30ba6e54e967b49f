#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "scinet/data.hpp"
#include "scinet/metrics.hpp"
#include "scinet/model_config.hpp"
#include "scinet/training.hpp"

namespace scinet {

struct DataSection {
  /// manifest.jsonl of a synthesized (or hand-made) dataset.
  std::filesystem::path manifest;
  /// Fold held out for validation during training; -1 selects the last fold.
  int val_fold = -1;
  /// Folds scored by eval; empty means the validation fold.
  std::vector<int> eval_folds;
  SynthConfig synth;
};

/// Everything a command needs. One top-level seed feeds weight
/// initialisation, chip sampling, augmentation, scene generation and folds.
struct RunConfig {
  ModelConfig model;
  /// True when the config file or a flag set any model key; eval and infer
  /// then insist that the checkpoint matches.
  bool model_given = false;
  TrainConfig train;
  DataSection data;
  MetricConfig metrics;
  std::filesystem::path out = "runs/scinet";
  std::uint64_t seed = 0;

  /// Relative paths resolve against `base_dir`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

// Commands. Each is usable in-process; the executable wraps them.

Manifest cmd_synth(const RunConfig& config, const std::filesystem::path& out_dir, bool force);

/// Trains on every fold but the validation fold and writes run_config.json,
/// epochs.jsonl, timing.jsonl, best.ckpt and last.ckpt into config.out.
FitResult cmd_train(const RunConfig& config, bool force);

struct EvalOutput {
  EvalReport report;
  std::string table;  // four headline metrics, percent
  std::string per_resolution_csv;
};
/// Scores the checkpoint on the configured folds. Reads only; the report
/// files go to `report_dir` when it is non-empty.
EvalOutput cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& report_dir = {});

/// Full-scale inference on one PPM. Writes a {0, 255} mask PGM and, when
/// `prob_out` is non-empty, an 8-bit probability PGM. Returns the mask.
Tensor cmd_infer(const RunConfig& config, const std::filesystem::path& checkpoint,
                 const std::filesystem::path& image, const std::filesystem::path& mask_out,
                 const std::filesystem::path& prob_out = {});

struct RfReport {
  std::string text;
  nlohmann::json structured;
  int analyzer_stride = 0;
  int measured_stride = 0;
};
/// Encoder RF/stride table, dense and parallel pyramid scale enumerations
/// for the configured rates, and a check of the analyzer's output stride
/// against a forward pass through the encoder.
RfReport cmd_rf_report(const ModelConfig& model);

/// Parses argv and runs a command. Returns the process exit code:
/// 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
int run_cli(int argc, char** argv);

}  // namespace scinet
