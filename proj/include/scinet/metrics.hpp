#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "scinet/tensor.hpp"

namespace scinet {

/// Pixel counts behind every score. Merging is component-wise addition.
struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
  bool operator==(const ConfusionCounts&) const = default;
};

struct MetricConfig {
  double beta = 1.0;
  double epsilon = 1e-4;
  /// Probabilities >= threshold count as building.
  double threshold = 0.5;

  void validate() const;
};

/// Counts over all pixels of `pred` (probabilities) against a {0, 1} mask.
ConfusionCounts confusion(const Tensor& pred, const Tensor& gt, double threshold = 0.5);
/// One ConfusionCounts per image of the batch.
std::vector<ConfusionCounts> confusion_per_image(const Tensor& pred, const Tensor& gt, double threshold = 0.5);

/// (TP + eps) / (TP + FP + FN + eps)
double iou(const ConfusionCounts& c, double epsilon = 1e-4);
/// ((1 + b^2) TP + eps) / ((1 + b^2) TP + b^2 FN + FP + eps)
double f1(const ConfusionCounts& c, double beta = 1.0, double epsilon = 1e-4);

enum class Averaging { Micro, Macro };

struct Scores {
  double iou = 0.0;
  double f1 = 0.0;
};

/// One image's counts with its ground-sample distance (cm/pixel).
struct ImageCounts {
  ConfusionCounts counts;
  int gsd_cm = 0;
};

/// Micro: scores of the merged counts. Macro: mean of per-image scores.
Scores aggregate(const std::vector<ImageCounts>& images, Averaging mode, const MetricConfig& config = {});

struct ScoreSummary {
  std::size_t images = 0;
  double micro_iou = 0.0, micro_f1 = 0.0, macro_iou = 0.0, macro_f1 = 0.0;
};

struct EvalReport {
  ScoreSummary overall;
  std::map<int, ScoreSummary> per_resolution;  // keyed by gsd_cm
};

EvalReport summarize(const std::vector<ImageCounts>& images, const MetricConfig& config = {});

/// Model x {micro-IoU, micro-F1, macro-IoU, macro-F1}, in percent.
std::string format_score_table(const std::vector<std::pair<std::string, ScoreSummary>>& rows);
/// gsd_cm,n_tiles,micro_iou,micro_f1,macro_iou,macro_f1
std::string per_resolution_csv(const EvalReport& report);
nlohmann::json to_json(const ScoreSummary& s);
nlohmann::json to_json(const EvalReport& report);

}  // namespace scinet
