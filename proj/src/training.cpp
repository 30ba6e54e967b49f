#include "scinet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "scinet/errors.hpp"
#include "scinet/log.hpp"

namespace scinet {

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be positive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (chip_px == 0 || chip_px % 32 != 0) throw ConfigError("train.chip_px must be a positive multiple of 32");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("train.lr0 must be positive");
  if (!(poly_power > 0.0)) throw ConfigError("train.poly_power must be positive");
  if (bce_weight < 0 || dice_weight < 0 || !(bce_weight + dice_weight > 0))
    throw ConfigError("train loss weights must be non-negative with a positive sum");
  if (!(dice_smooth >= 0)) throw ConfigError("train.dice_smooth must be non-negative");
  if (!(augment_prob >= 0.0 && augment_prob <= 1.0)) throw ConfigError("train.augment_prob must lie in [0, 1]");
  if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},         {"batch_size", batch_size},   {"chip_px", chip_px},
          {"lr0", lr0},               {"poly_power", poly_power},   {"bce_weight", bce_weight},
          {"dice_weight", dice_weight}, {"dice_smooth", dice_smooth}, {"augment_prob", augment_prob},
          {"steps_per_epoch", steps_per_epoch}, {"clip_norm", clip_norm}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "epochs") v.get_to(c.epochs);
      else if (key == "batch_size") v.get_to(c.batch_size);
      else if (key == "chip_px") v.get_to(c.chip_px);
      else if (key == "lr0") v.get_to(c.lr0);
      else if (key == "poly_power") v.get_to(c.poly_power);
      else if (key == "bce_weight") v.get_to(c.bce_weight);
      else if (key == "dice_weight") v.get_to(c.dice_weight);
      else if (key == "dice_smooth") v.get_to(c.dice_smooth);
      else if (key == "augment_prob") v.get_to(c.augment_prob);
      else if (key == "steps_per_epoch") v.get_to(c.steps_per_epoch);
      else if (key == "clip_norm") v.get_to(c.clip_norm);
      else if (key == "seed") v.get_to(c.seed);
      else throw ConfigError("unknown train key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

double poly_lr(int epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch > config.epochs)
    throw ConfigError("poly_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) + "]");
  if (epoch == config.epochs) return 0.0;
  return config.lr0 * std::pow(1.0 - static_cast<double>(epoch) / config.epochs, config.poly_power);
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
LossValue bce_dice_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, double bce_weight,
                        double dice_weight, double dice_smooth, BasicTensor<T>* grad) {
  if (!(pred.shape() == target.shape()))
    throw ShapeError("loss: prediction " + pred.shape().str() + " vs target " + target.shape().str());
  const std::size_t n = pred.numel();
  if (n == 0) throw ShapeError("loss: empty tensors");
  double bce = 0, inter = 0, sum_p = 0, sum_g = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(static_cast<double>(pred[i]), kProbabilityClamp, 1.0 - kProbabilityClamp);
    const double g = target[i];
    bce -= g * std::log(p) + (1 - g) * std::log1p(-p);
    inter += p * g;
    sum_p += p;
    sum_g += g;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const double denom = sum_p + sum_g + dice_smooth;
  const double overlap = 2 * inter + dice_smooth;
  LossValue out;
  out.bce = bce * inv_n;
  out.dice = 1.0 - overlap / denom;
  out.total = bce_weight * out.bce + dice_weight * out.dice;
  if (grad != nullptr) {
    *grad = BasicTensor<T>(pred.shape());
    const double d2 = denom * denom;
    for (std::size_t i = 0; i < n; ++i) {
      const double p = std::clamp(static_cast<double>(pred[i]), kProbabilityClamp, 1.0 - kProbabilityClamp);
      const double g = target[i];
      const double d_bce = (-g / p + (1 - g) / (1 - p)) * inv_n;
      const double d_dice = -(2 * g * denom - overlap) / d2;
      (*grad)[i] = static_cast<T>(bce_weight * d_bce + dice_weight * d_dice);
    }
  }
  return out;
}

template LossValue bce_dice_loss<float>(const Tensor&, const Tensor&, double, double, double, Tensor*);
template LossValue bce_dice_loss<double>(const TensorD&, const TensorD&, double, double, double, TensorD*);

// ---------------------------------------------------------------------------
// Optimizer

void Adam::step(const std::vector<ParamView<float>>& params, double lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.size(), 0.0f);
      v_.emplace_back(p.value.size(), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw ConfigError("Adam: parameter list changed between steps");
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = m_[k];
    auto& v = v_[k];
    const auto& p = params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = beta1_ * m[i] + (1 - beta1_) * g;
      const double vi = beta2_ * v[i] + (1 - beta2_) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      p.value[i] = static_cast<float>(p.value[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + epsilon_));
    }
  }
}

std::vector<NamedArray> Adam::export_state(const std::vector<ParamView<float>>& params) const {
  std::vector<NamedArray> out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    const bool have = k < m_.size();
    out.push_back({p.name + ".m", p.shape, have ? m_[k] : std::vector<float>(p.value.size(), 0.0f)});
    out.push_back({p.name + ".v", p.shape, have ? v_[k] : std::vector<float>(p.value.size(), 0.0f)});
  }
  return out;
}

void Adam::import_state(const std::vector<ParamView<float>>& params, const std::vector<NamedArray>& state,
                        std::uint64_t step) {
  if (state.size() != 2 * params.size())
    throw CheckpointError("optimizer state has " + std::to_string(state.size()) + " arrays, expected " +
                          std::to_string(2 * params.size()));
  m_.clear();
  v_.clear();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& m = state[2 * k];
    const auto& v = state[2 * k + 1];
    if (m.name != params[k].name + ".m" || v.name != params[k].name + ".v" || m.values.size() != params[k].value.size() ||
        v.values.size() != params[k].value.size())
      throw CheckpointError("optimizer state does not match parameter " + params[k].name);
    m_.push_back(m.values);
    v_.push_back(v.values);
  }
  step_ = step;
}

double clip_gradients(const std::vector<ParamView<float>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (float g : p.grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (const auto& p : params)
      for (float& g : p.grad) g *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Augmentation and chips

std::string to_string(Augmentation a) {
  switch (a) {
    case Augmentation::Identity: return "identity";
    case Augmentation::HFlip: return "hflip";
    case Augmentation::VFlip: return "vflip";
    case Augmentation::Rot180: return "rot180";
  }
  return "?";
}

Augmentation draw_augmentation(Rng& rng, double p) {
  if (!rng.bernoulli(p)) return Augmentation::Identity;
  switch (rng.below(3)) {
    case 0: return Augmentation::HFlip;
    case 1: return Augmentation::VFlip;
    default: return Augmentation::Rot180;
  }
}

namespace {

Tensor transform(const Tensor& t, Augmentation a) {
  if (a == Augmentation::Identity) return t;
  const Shape& s = t.shape();
  const bool flip_w = a == Augmentation::HFlip || a == Augmentation::Rot180;
  const bool flip_h = a == Augmentation::VFlip || a == Augmentation::Rot180;
  Tensor out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < s.h; ++i)
        for (std::size_t j = 0; j < s.w; ++j)
          out.at(n, c, flip_h ? s.h - 1 - i : i, flip_w ? s.w - 1 - j : j) = t.at(n, c, i, j);
  return out;
}

Tensor crop_tensor(const Tensor& t, std::size_t top, std::size_t left, std::size_t size) {
  const Shape& s = t.shape();
  Tensor out(Shape{s.n, s.c, size, size});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < size; ++i) std::copy_n(&t.at(n, c, top + i, left), size, &out.at(n, c, i, 0));
  return out;
}

}  // namespace

SampleTile apply_augmentation(const SampleTile& sample, Augmentation a) {
  SampleTile out = sample;
  out.image = transform(sample.image, a);
  out.mask = transform(sample.mask, a);
  return out;
}

SampleTile augment(const SampleTile& sample, Rng& rng, double p) {
  if (sample.image.shape().h != sample.mask.shape().h || sample.image.shape().w != sample.mask.shape().w)
    throw ShapeError("augment: image " + sample.image.shape().str() + " and mask " + sample.mask.shape().str() +
                     " differ spatially");
  return apply_augmentation(sample, draw_augmentation(rng, p));
}

std::pair<std::size_t, std::size_t> draw_chip_corner(std::size_t h, std::size_t w, std::size_t chip, Rng& rng) {
  if (chip > h || chip > w)
    throw ShapeError("chip " + std::to_string(chip) + " larger than tile " + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t top = rng.below(h - chip + 1);
  const std::size_t left = rng.below(w - chip + 1);
  return {top, left};
}

SampleTile crop(const SampleTile& sample, std::size_t top, std::size_t left, std::size_t size) {
  const Shape& s = sample.image.shape();
  if (top + size > s.h || left + size > s.w) throw ShapeError("crop window outside tile " + s.str());
  SampleTile out = sample;
  out.image = crop_tensor(sample.image, top, left, size);
  out.mask = crop_tensor(sample.mask, top, left, size);
  return out;
}

SampleTile sample_chip(const SampleTile& sample, std::size_t chip, Rng& rng) {
  const Shape& s = sample.image.shape();
  const auto [top, left] = draw_chip_corner(s.h, s.w, chip, rng);
  return crop(sample, top, left, chip);
}

std::pair<Tensor, Tensor> stack_batch(const std::vector<SampleTile>& samples) {
  if (samples.empty()) throw ShapeError("stack_batch: no samples");
  const Shape s0 = samples[0].image.shape();
  Tensor images(Shape{samples.size(), s0.c, s0.h, s0.w});
  Tensor masks(Shape{samples.size(), 1, s0.h, s0.w});
  const std::size_t img_len = s0.c * s0.h * s0.w, mask_len = s0.h * s0.w;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const auto& t = samples[b];
    if (!(t.image.shape() == s0) || !(t.mask.shape() == Shape{1, 1, s0.h, s0.w}))
      throw ShapeError("stack_batch: sample " + std::to_string(b) + " has shape " + t.image.shape().str() +
                       ", expected " + s0.str());
    std::copy_n(t.image.data().begin(), img_len, images.data().begin() + static_cast<std::ptrdiff_t>(b * img_len));
    std::copy_n(t.mask.data().begin(), mask_len, masks.data().begin() + static_cast<std::ptrdiff_t>(b * mask_len));
  }
  return {std::move(images), std::move(masks)};
}

// ---------------------------------------------------------------------------
// Evaluation

Tensor predict(Model<float>& model, const Tensor& image) {
  struct Restore {
    Model<float>& m;
    Mode mode;
    ~Restore() {
      m.set_mode(mode);
      m.set_caching(true);
    }
  } restore{model, Mode::Train};
  model.set_mode(Mode::Eval);
  model.set_caching(false);
  return model.forward(image);
}

std::vector<ImageCounts> evaluate_tiles(Model<float>& model, const std::vector<SampleTile>& tiles,
                                        const MetricConfig& metrics) {
  std::vector<ImageCounts> out;
  out.reserve(tiles.size());
  for (const auto& t : tiles) {
    const Tensor prob = predict(model, t.image);
    out.push_back({confusion(prob, t.mask, metrics.threshold), t.gsd_cm});
  }
  return out;
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j = {{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss}, {"steps", steps}};
  j["val_micro_iou"] = std::isfinite(val_micro_iou) ? nlohmann::json(val_micro_iou) : nlohmann::json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

[[noreturn]] void abort_non_finite(const std::filesystem::path& out_dir, const TrainConfig& config, int epoch,
                                   std::size_t step, std::uint64_t global_step, double lr, const LossValue& loss,
                                   const std::vector<SampleTile>& batch,
                                   const std::vector<Augmentation>& augmentations) {
  const std::filesystem::path dir =
      (out_dir.empty() ? std::filesystem::temp_directory_path() / ("scinet-seed" + std::to_string(config.seed))
                       : out_dir) /
      "nonfinite_dump";
  std::filesystem::create_directories(dir);
  nlohmann::json j = {{"epoch", epoch}, {"step_in_epoch", step}, {"global_step", global_step}, {"lr", lr},
                      {"bce", std::isfinite(loss.bce) ? nlohmann::json(loss.bce) : nlohmann::json("non-finite")},
                      {"dice", std::isfinite(loss.dice) ? nlohmann::json(loss.dice) : nlohmann::json("non-finite")},
                      {"train", config.to_json()}};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& t = batch[b];
    float lo = 0, hi = 0;
    bool finite = true;
    for (float v : t.image.data()) {
      finite = finite && std::isfinite(v);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    j["inputs"].push_back({{"id", t.id}, {"gsd_cm", t.gsd_cm}, {"augmentation", to_string(augmentations[b])},
                           {"min", lo}, {"max", hi}, {"finite", finite}});
    write_ppm(dir / ("input" + std::to_string(b) + ".ppm"), t.image);
    write_pgm(dir / ("input" + std::to_string(b) + ".mask.pgm"), t.mask);
  }
  std::ofstream(dir / "dump.json") << j.dump(2) << '\n';
  throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                       " (lr " + std::to_string(lr) + "); diagnostics written to " + dir.string());
}

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot write " + path.string());
  out << line << '\n';
}

}  // namespace

FitResult fit(Model<float>& model, const std::vector<SampleTile>& train, const std::vector<SampleTile>& val,
              const TrainConfig& config, const FitOptions& options) {
  config.validate();
  if (train.empty()) throw DataError("fit: no training tiles");
  if (val.empty() && !options.validator) throw DataError("fit: no validation tiles and no validator");
  for (const auto& v : val)
    for (const auto& t : train)
      if (!v.id.empty() && v.id == t.id) throw DataError("fit: tile " + v.id + " is in both training and validation");

  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    for (const char* f : {"epochs.jsonl", "timing.jsonl"}) std::filesystem::remove(options.out_dir / f);
  }

  Rng rng(config.seed ^ 0x7261696eULL);
  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size();
  const std::size_t steps =
      config.steps_per_epoch > 0 ? config.steps_per_epoch : (train.size() + config.batch_size - 1) / config.batch_size;

  Adam adam;
  FitResult result;
  result.best_metric = -std::numeric_limits<double>::infinity();
  model.set_mode(Mode::Train);
  model.set_caching(true);
  const auto params = model.parameters();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = poly_lr(epoch, config);
    double loss_sum = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<SampleTile> batch;
      std::vector<Augmentation> augs;
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        if (cursor == order.size()) {
          for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
          shuffle(order, rng);
          cursor = 0;
        }
        const SampleTile chip = sample_chip(train[order[cursor++]], config.chip_px, rng);
        augs.push_back(draw_augmentation(rng, config.augment_prob));
        batch.push_back(apply_augmentation(chip, augs.back()));
      }
      const auto [images, masks] = stack_batch(batch);
      const Tensor prob = model.forward(images);
      Tensor grad;
      const LossValue loss =
          bce_dice_loss(prob, masks, config.bce_weight, config.dice_weight, config.dice_smooth, &grad);
      if (!std::isfinite(loss.total))
        abort_non_finite(options.out_dir, config, epoch, step, adam.steps(), lr, loss, batch, augs);
      model.zero_grad();
      model.backward(grad);
      if (config.clip_norm > 0) clip_gradients(params, config.clip_norm);
      adam.step(params, lr);
      loss_sum += loss.total;
      if (options.on_step) options.on_step(adam.steps() - 1, loss);
    }

    const double metric = options.validator ? options.validator(model, epoch)
                                            : aggregate(evaluate_tiles(model, val, options.metrics),
                                                        Averaging::Micro, options.metrics)
                                                  .iou;
    model.set_mode(Mode::Train);
    model.set_caching(true);

    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(steps), metric, steps};
    result.epochs.push_back(rec);
    // strict comparison: the earliest epoch wins ties
    if (metric > result.best_metric) {
      result.best_metric = metric;
      result.best_epoch = epoch;
      result.best = capture(model);
      result.best.best_metric = metric;
      result.best.best_epoch = epoch;
      if (!options.out_dir.empty()) write_checkpoint(options.out_dir / "best.ckpt", result.best);
    }
    if (!options.out_dir.empty()) {
      Checkpoint last = capture(model);
      last.best_metric = result.best_metric;
      last.best_epoch = result.best_epoch;
      last.has_optimizer = true;
      last.optimizer_step = adam.steps();
      last.optimizer = adam.export_state(params);
      write_checkpoint(options.out_dir / "last.ckpt", last);
      append_line(options.out_dir / "epochs.jsonl", rec.to_json().dump());
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      append_line(options.out_dir / "timing.jsonl", nlohmann::json{{"epoch", epoch}, {"wall_s", secs}}.dump());
    }
    log_info("epoch " + std::to_string(epoch) + ": lr " + std::to_string(lr) + ", loss " +
             std::to_string(rec.train_loss) + ", val micro-IoU " + std::to_string(metric));
    if (options.on_epoch) options.on_epoch(rec);
  }
  if (result.best_epoch < 0) {
    // every validation score was NaN; keep the final weights
    result.best = capture(model);
    result.best_epoch = config.epochs - 1;
    result.best.best_epoch = result.best_epoch;
  }
  return result;
}

}  // namespace scinet
