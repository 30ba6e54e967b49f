#include "scinet/metrics.hpp"

#include <cstdio>

#include "scinet/errors.hpp"

namespace scinet {

void MetricConfig::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("metrics.threshold must lie in (0, 1), got " + std::to_string(threshold));
  if (!(epsilon >= 0.0)) throw ConfigError("metrics.epsilon must be non-negative");
  if (!(beta > 0.0)) throw ConfigError("metrics.beta must be positive");
}

namespace {

ConfusionCounts count_range(const float* pred, const float* gt, std::size_t size, double threshold) {
  ConfusionCounts c;
  for (std::size_t i = 0; i < size; ++i) {
    if (gt[i] != 0.0f && gt[i] != 1.0f)
      throw DataError("ground-truth mask must be binary, found " + std::to_string(gt[i]));
    const bool truth = gt[i] == 1.0f;
    const bool positive = pred[i] >= threshold;
    c.tp += positive && truth;
    c.fp += positive && !truth;
    c.fn += !positive && truth;
  }
  return c;
}

void check_pair(const Tensor& pred, const Tensor& gt) {
  if (!(pred.shape() == gt.shape()))
    throw ShapeError("prediction " + pred.shape().str() + " and mask " + gt.shape().str() + " differ in shape");
}

}  // namespace

ConfusionCounts confusion(const Tensor& pred, const Tensor& gt, double threshold) {
  check_pair(pred, gt);
  return count_range(pred.ptr(), gt.ptr(), pred.numel(), threshold);
}

std::vector<ConfusionCounts> confusion_per_image(const Tensor& pred, const Tensor& gt, double threshold) {
  check_pair(pred, gt);
  const std::size_t per_image = pred.shape().c * pred.shape().plane();
  std::vector<ConfusionCounts> out;
  for (std::size_t n = 0; n < pred.shape().n; ++n)
    out.push_back(count_range(pred.ptr() + n * per_image, gt.ptr() + n * per_image, per_image, threshold));
  return out;
}

double iou(const ConfusionCounts& c, double epsilon) {
  const double tp = static_cast<double>(c.tp);
  return (tp + epsilon) / (tp + static_cast<double>(c.fp) + static_cast<double>(c.fn) + epsilon);
}

double f1(const ConfusionCounts& c, double beta, double epsilon) {
  const double b2 = beta * beta;
  const double weighted_tp = (1.0 + b2) * static_cast<double>(c.tp);
  return (weighted_tp + epsilon) /
         (weighted_tp + b2 * static_cast<double>(c.fn) + static_cast<double>(c.fp) + epsilon);
}

Scores aggregate(const std::vector<ImageCounts>& images, Averaging mode, const MetricConfig& config) {
  if (images.empty()) throw DataError("cannot aggregate scores over an empty image list");
  Scores s;
  if (mode == Averaging::Micro) {
    ConfusionCounts total;
    for (const auto& im : images) total += im.counts;
    s.iou = iou(total, config.epsilon);
    s.f1 = f1(total, config.beta, config.epsilon);
    return s;
  }
  for (const auto& im : images) {
    s.iou += iou(im.counts, config.epsilon);
    s.f1 += f1(im.counts, config.beta, config.epsilon);
  }
  s.iou /= static_cast<double>(images.size());
  s.f1 /= static_cast<double>(images.size());
  return s;
}

namespace {

ScoreSummary summary_of(const std::vector<ImageCounts>& images, const MetricConfig& config) {
  const Scores micro = aggregate(images, Averaging::Micro, config);
  const Scores macro = aggregate(images, Averaging::Macro, config);
  return {images.size(), micro.iou, micro.f1, macro.iou, macro.f1};
}

}  // namespace

EvalReport summarize(const std::vector<ImageCounts>& images, const MetricConfig& config) {
  EvalReport r;
  r.overall = summary_of(images, config);
  std::map<int, std::vector<ImageCounts>> groups;
  for (const auto& im : images) groups[im.gsd_cm].push_back(im);
  for (const auto& [gsd, group] : groups) r.per_resolution[gsd] = summary_of(group, config);
  return r;
}

std::string format_score_table(const std::vector<std::pair<std::string, ScoreSummary>>& rows) {
  std::size_t name_width = 5;
  for (const auto& [name, s] : rows) name_width = std::max(name_width, name.size());
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %9s  %9s  %9s  %9s\n", static_cast<int>(name_width), "model", "micro-IoU",
                "micro-F1", "macro-IoU", "macro-F1");
  out += line;
  for (const auto& [name, s] : rows) {
    std::snprintf(line, sizeof(line), "%-*s  %9.2f  %9.2f  %9.2f  %9.2f\n", static_cast<int>(name_width),
                  name.c_str(), 100 * s.micro_iou, 100 * s.micro_f1, 100 * s.macro_iou, 100 * s.macro_f1);
    out += line;
  }
  return out;
}

std::string per_resolution_csv(const EvalReport& report) {
  std::string out = "gsd_cm,n_tiles,micro_iou,micro_f1,macro_iou,macro_f1\n";
  char line[256];
  for (const auto& [gsd, s] : report.per_resolution) {
    std::snprintf(line, sizeof(line), "%d,%zu,%.6f,%.6f,%.6f,%.6f\n", gsd, s.images, s.micro_iou, s.micro_f1,
                  s.macro_iou, s.macro_f1);
    out += line;
  }
  return out;
}

nlohmann::json to_json(const ScoreSummary& s) {
  return {{"images", s.images},
          {"micro_iou", s.micro_iou},
          {"micro_f1", s.micro_f1},
          {"macro_iou", s.macro_iou},
          {"macro_f1", s.macro_f1}};
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& [gsd, s] : report.per_resolution) {
    auto j = to_json(s);
    j["gsd_cm"] = gsd;
    per.push_back(j);
  }
  return {{"overall", to_json(report.overall)}, {"per_resolution", per}};
}

}  // namespace scinet
