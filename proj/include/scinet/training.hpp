#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "scinet/checkpoint.hpp"
#include "scinet/data.hpp"
#include "scinet/metrics.hpp"
#include "scinet/model.hpp"
#include "scinet/rng.hpp"

namespace scinet {

struct TrainConfig {
  int epochs = 50;
  std::size_t batch_size = 12;
  std::size_t chip_px = 512;
  double lr0 = 1e-4;
  double poly_power = 0.9;
  double bce_weight = 0.5;
  double dice_weight = 0.5;
  double dice_smooth = 1.0;
  double augment_prob = 0.8;
  /// 0 means one pass over the training tiles: ceil(tiles / batch).
  std::size_t steps_per_epoch = 0;
  /// Global L2 gradient-norm clip; 0 disables it.
  double clip_norm = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  /// Keys absent from `j` keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
  static TrainConfig from_json(const nlohmann::json& j);
};

/// lr0 * (1 - epoch / epochs)^power, exactly lr0 at 0 and 0 at `epochs`.
double poly_lr(int epoch, const TrainConfig& config);

struct LossValue {
  double total = 0.0;
  double bce = 0.0;
  double dice = 0.0;
};

inline constexpr double kProbabilityClamp = 1e-7;

/// bce_weight * mean BCE + dice_weight * (1 - soft Dice over the whole batch).
/// Predictions are clamped to [1e-7, 1 - 1e-7]. When `grad` is non-null it
/// receives d(total)/d(pred), evaluated at the clamped values.
template <typename T>
LossValue bce_dice_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, double bce_weight,
                        double dice_weight, double dice_smooth = 1.0, BasicTensor<T>* grad = nullptr);

/// Adam with bias correction. Moments are kept per parameter in the order
/// the parameters are presented.
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  void step(const std::vector<ParamView<float>>& params, double lr);
  std::uint64_t steps() const { return step_; }

  /// Moments as "<param>.m" / "<param>.v" arrays for checkpoints.
  std::vector<NamedArray> export_state(const std::vector<ParamView<float>>& params) const;
  void import_state(const std::vector<ParamView<float>>& params, const std::vector<NamedArray>& state,
                    std::uint64_t step);

 private:
  double beta1_, beta2_, epsilon_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Rescales gradients so their global L2 norm is at most max_norm. Returns the norm before clipping.
double clip_gradients(const std::vector<ParamView<float>>& params, double max_norm);

enum class Augmentation { Identity, HFlip, VFlip, Rot180 };
std::string to_string(Augmentation a);

/// Identity with probability 1 - p, else one of the three flips uniformly.
Augmentation draw_augmentation(Rng& rng, double p);
SampleTile apply_augmentation(const SampleTile& sample, Augmentation a);
SampleTile augment(const SampleTile& sample, Rng& rng, double p);

/// Top-left corner uniform over {0..h-chip} x {0..w-chip}.
std::pair<std::size_t, std::size_t> draw_chip_corner(std::size_t h, std::size_t w, std::size_t chip, Rng& rng);
SampleTile crop(const SampleTile& sample, std::size_t top, std::size_t left, std::size_t size);
SampleTile sample_chip(const SampleTile& sample, std::size_t chip, Rng& rng);

/// Stacks equally sized tiles into (n, 3, h, w) images and (n, 1, h, w) masks.
std::pair<Tensor, Tensor> stack_batch(const std::vector<SampleTile>& samples);

/// Full-size prediction in eval mode without activation caching. The model's
/// previous mode and caching are restored.
Tensor predict(Model<float>& model, const Tensor& image);
/// Per-tile confusion counts of full-size predictions.
std::vector<ImageCounts> evaluate_tiles(Model<float>& model, const std::vector<SampleTile>& tiles,
                                        const MetricConfig& metrics = {});

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_micro_iou = 0.0;
  std::size_t steps = 0;
  nlohmann::json to_json() const;
};

struct FitOptions {
  /// Run directory for epochs.jsonl, timing.jsonl, best.ckpt and last.ckpt.
  /// Empty: nothing is written.
  std::filesystem::path out_dir;
  /// Replaces the default validation (micro-IoU over the validation tiles).
  std::function<double(Model<float>&, int epoch)> validator;
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called after every optimizer step with the step index (from 0) and its loss.
  std::function<void(std::uint64_t, const LossValue&)> on_step;
  MetricConfig metrics;
};

struct FitResult {
  std::vector<EpochRecord> epochs;
  double best_metric = 0.0;
  int best_epoch = -1;
  /// Weights of the best epoch (earliest one on ties).
  Checkpoint best;
};

/// Trains with Adam and poly LR. Each epoch draws batches of random,
/// augmented chips, then validates on full-size tiles in eval mode. The
/// checkpoint with the highest validation micro-IoU is kept. A non-finite
/// loss aborts with NumericalError after writing a diagnostic dump.
FitResult fit(Model<float>& model, const std::vector<SampleTile>& train, const std::vector<SampleTile>& val,
              const TrainConfig& config, const FitOptions& options = {});

}  // namespace scinet
