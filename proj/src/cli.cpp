#include "scinet/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "scinet/checkpoint.hpp"
#include "scinet/errors.hpp"
#include "scinet/log.hpp"
#include "scinet/model.hpp"
#include "scinet/parallel.hpp"
#include "scinet/rf.hpp"

namespace scinet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run config

namespace {

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

MetricConfig metrics_from_json(const nlohmann::json& j) {
  MetricConfig m;
  for (const auto& [key, v] : j.items()) {
    if (key == "beta") v.get_to(m.beta);
    else if (key == "epsilon") v.get_to(m.epsilon);
    else if (key == "threshold") v.get_to(m.threshold);
    else throw ConfigError("unknown metrics key '" + key + "'");
  }
  m.validate();
  return m;
}

void reject_nested_seed(const nlohmann::json& section, const std::string& where) {
  if (section.is_object() && section.contains("seed"))
    throw ConfigError(where + ".seed is not accepted; set the top-level seed");
}

/// Top-level keys whose values differ between two JSON objects.
std::string differing_keys(const nlohmann::json& a, const nlohmann::json& b) {
  std::string out;
  for (const auto& [key, value] : a.items()) {
    if (!b.contains(key) || b.at(key) != value) out += (out.empty() ? "" : ", ") + key;
  }
  return out;
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") {
        value.get_to(c.seed);
      } else if (key == "out") {
        c.out = resolve(base_dir, value.get<std::string>());
      } else if (key == "model") {
        c.model = ModelConfig::from_json(value);
        c.model_given = true;
      } else if (key == "train") {
        reject_nested_seed(value, "train");
        c.train = TrainConfig::from_json(value);
      } else if (key == "metrics") {
        c.metrics = metrics_from_json(value);
      } else if (key == "data") {
        for (const auto& [k, v] : value.items()) {
          if (k == "manifest") c.data.manifest = resolve(base_dir, v.get<std::string>());
          else if (k == "val_fold") v.get_to(c.data.val_fold);
          else if (k == "eval_folds") v.get_to(c.data.eval_folds);
          else if (k == "synth") {
            reject_nested_seed(v, "data.synth");
            c.data.synth = SynthConfig::from_json(v);
          } else {
            throw ConfigError("unknown data key '" + k + "'");
          }
        }
      } else {
        throw ConfigError("unknown config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.train.seed = c.seed;
  c.data.synth.seed = c.seed;
  return c;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json train_json = train.to_json();
  train_json.erase("seed");
  nlohmann::json synth_json = data.synth.to_json();
  synth_json.erase("seed");
  nlohmann::json data_json = {{"val_fold", data.val_fold}, {"eval_folds", data.eval_folds}, {"synth", synth_json}};
  if (!data.manifest.empty()) data_json["manifest"] = data.manifest.string();
  return {{"seed", seed},
          {"out", out.string()},
          {"model", model.to_json()},
          {"train", train_json},
          {"data", data_json},
          {"metrics", {{"beta", metrics.beta}, {"epsilon", metrics.epsilon}, {"threshold", metrics.threshold}}}};
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Commands

namespace {

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

int resolved_val_fold(const RunConfig& config, const Manifest& manifest) {
  if (manifest.folds < 2) throw DataError("manifest has " + std::to_string(manifest.folds) + " folds; need at least 2");
  const int fold = config.data.val_fold < 0 ? manifest.folds - 1 : config.data.val_fold;
  if (fold >= manifest.folds)
    throw ConfigError("data.val_fold " + std::to_string(fold) + " outside [0, " + std::to_string(manifest.folds) + ")");
  return fold;
}

Manifest open_manifest(const RunConfig& config) {
  if (config.data.manifest.empty()) throw ConfigError("data.manifest is not set (use --manifest or the config file)");
  return read_manifest(config.data.manifest);
}

std::vector<SampleTile> load_folds(const Manifest& manifest, const std::vector<int>& folds, bool include) {
  std::vector<SampleTile> out;
  for (const auto& r : manifest.records) {
    const bool member = std::find(folds.begin(), folds.end(), r.fold) != folds.end();
    if (member == include) out.push_back(load_tile(manifest, r));
  }
  return out;
}

std::unique_ptr<Model<float>> model_for_checkpoint(const RunConfig& config, const fs::path& checkpoint) {
  const Checkpoint ck = read_checkpoint(checkpoint);
  if (config.model_given && !(ck.config == config.model))
    throw ConfigError("checkpoint " + checkpoint.string() + " was trained with a different model config (keys: " +
                      differing_keys(ck.config.to_json(), config.model.to_json()) + ")");
  auto model = std::make_unique<Model<float>>(ck.config, 0);
  restore(*model, ck);
  return model;
}

}  // namespace

Manifest cmd_synth(const RunConfig& config, const fs::path& out_dir, bool force) {
  if (out_dir.empty()) throw ConfigError("synth needs an output directory");
  if (non_empty_dir(out_dir)) {
    if (!force) throw ConfigError("output directory " + out_dir.string() + " is not empty (use --force to replace it)");
    if (fs::absolute(out_dir) == fs::absolute(out_dir).root_path()) throw ConfigError("refusing to clear a filesystem root");
    for (const auto& entry : fs::directory_iterator(out_dir)) fs::remove_all(entry.path());
  }
  const SynthConfig& s = config.data.synth;
  log_info("rendering " + std::to_string(s.scenes * s.gsds_cm.size()) + " base rasters (" + std::to_string(s.scenes) +
           " scenes x " + std::to_string(s.gsds_cm.size()) + " gsds) of " + std::to_string(s.raster_px) + " px");
  return synthesize_dataset(s, out_dir);
}

FitResult cmd_train(const RunConfig& config, bool force) {
  const Manifest manifest = open_manifest(config);
  const int val_fold = resolved_val_fold(config, manifest);
  if (!force && (fs::exists(config.out / "best.ckpt") || fs::exists(config.out / "epochs.jsonl")))
    throw ConfigError("run directory " + config.out.string() + " already holds a run (use --force to overwrite)");
  const auto val = load_folds(manifest, {val_fold}, true);
  const auto train = load_folds(manifest, {val_fold}, false);
  if (val.empty()) throw DataError("validation fold " + std::to_string(val_fold) + " is empty");
  log_info("training on " + std::to_string(train.size()) + " tiles, validating on fold " + std::to_string(val_fold) +
           " (" + std::to_string(val.size()) + " tiles)");
  fs::create_directories(config.out);
  std::ofstream(config.out / "run_config.json") << config.to_json().dump(2) << '\n';
  Model<float> model(config.model, config.seed);
  FitOptions options;
  options.out_dir = config.out;
  options.metrics = config.metrics;
  return fit(model, train, val, config.train, options);
}

EvalOutput cmd_eval(const RunConfig& config, const fs::path& checkpoint, const fs::path& report_dir) {
  auto model = model_for_checkpoint(config, checkpoint);
  const Manifest manifest = open_manifest(config);
  std::vector<int> folds = config.data.eval_folds;
  if (folds.empty()) folds = {resolved_val_fold(config, manifest)};
  const auto tiles = load_folds(manifest, folds, true);
  if (tiles.empty()) throw DataError("no tiles in the selected evaluation folds");
  EvalOutput out;
  out.report = summarize(evaluate_tiles(*model, tiles, config.metrics), config.metrics);
  out.table = format_score_table({{checkpoint.stem().string(), out.report.overall}});
  out.per_resolution_csv = per_resolution_csv(out.report);
  if (!report_dir.empty()) {
    fs::create_directories(report_dir);
    std::ofstream(report_dir / "eval_scores.json") << to_json(out.report).dump(2) << '\n';
    std::ofstream(report_dir / "eval_per_resolution.csv") << out.per_resolution_csv;
  }
  return out;
}

Tensor cmd_infer(const RunConfig& config, const fs::path& checkpoint, const fs::path& image_path,
                 const fs::path& mask_out, const fs::path& prob_out) {
  auto model = model_for_checkpoint(config, checkpoint);
  const Tensor image = read_ppm(image_path);
  const Shape& s = image.shape();
  // pad to the encoder's multiple of 32 by edge replication, then crop back
  const std::size_t h = (s.h + 31) / 32 * 32, w = (s.w + 31) / 32 * 32;
  Tensor padded(Shape{1, s.c, h, w});
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) padded.at(0, c, i, j) = image.at(0, c, std::min(i, s.h - 1), std::min(j, s.w - 1));
  const Tensor prob_full = predict(*model, padded);
  Tensor prob(Shape{1, 1, s.h, s.w}), mask(Shape{1, 1, s.h, s.w});
  for (std::size_t i = 0; i < s.h; ++i) {
    for (std::size_t j = 0; j < s.w; ++j) {
      prob.at(0, 0, i, j) = prob_full.at(0, 0, i, j);
      mask.at(0, 0, i, j) = prob_full.at(0, 0, i, j) >= config.metrics.threshold ? 1.0f : 0.0f;
    }
  }
  if (!mask_out.empty()) {
    if (mask_out.has_parent_path()) fs::create_directories(mask_out.parent_path());
    write_pgm(mask_out, mask);
  }
  if (!prob_out.empty()) write_gray_pgm(prob_out, prob);
  return mask;
}

RfReport cmd_rf_report(const ModelConfig& model) {
  model.validate();
  RfReport r;
  const Encoder<float> encoder(model);
  const auto chain = rf::analyze_chain(encoder.layer_specs());
  r.analyzer_stride = static_cast<int>(chain.back().output_stride);

  // shapes only; untrained weights suffice
  Encoder<float> probe(model);
  const std::size_t side = 64;
  const auto features = probe.forward(Tensor(Shape{1, model.in_channels, side, side}));
  r.measured_stride = static_cast<int>(side / features[4].shape().h);

  std::ostringstream os;
  os << "model: stage5 " << to_string(model.stage5) << ", pyramid " << to_string(model.pyramid) << "\n\n";
  os << "encoder receptive fields\n" << rf::format_chain(chain);
  os << "output stride " << r.analyzer_stride << "\n";
  os << "stride check: analyzer " << r.analyzer_stride << ", forward pass " << r.measured_stride << " -> "
     << (r.analyzer_stride == r.measured_stride ? "ok" : "MISMATCH") << "\n";
  r.structured = {{"model", model.to_json()},
                  {"encoder", rf::chain_to_json(chain)},
                  {"output_stride", r.analyzer_stride},
                  {"measured_stride", r.measured_stride}};
  if (!model.rates.empty()) {
    const auto dense = rf::enumerate_pyramid_scales(rf::Topology::Dense, model.rates, 3);
    const auto parallel = rf::enumerate_pyramid_scales(rf::Topology::Parallel, model.rates, 3);
    os << "\ncascaded (dense) pyramid, in stage-5 pixels\n" << rf::format_pyramid(dense);
    os << "\nparallel pyramid, in stage-5 pixels\n" << rf::format_pyramid(parallel);
    r.structured["dense"] = rf::pyramid_to_json(dense);
    r.structured["parallel"] = rf::pyramid_to_json(parallel);
  }
  r.text = os.str();
  return r;
}

// ---------------------------------------------------------------------------
// Argument parsing

namespace {

struct Flags {
  std::string config, out, checkpoint, manifest, preset, pyramid, stage5, image, mask_out, prob_out;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, val_fold;
  std::optional<double> lr;
  std::optional<std::size_t> batch, chip, steps, scenes, tile, raster;
  std::vector<int> eval_folds;
  bool force = false, deterministic = false;
};

/// Flags are applied on top of the config file's JSON: flag > file > default.
RunConfig build_config(const Flags& f) {
  nlohmann::json j = nlohmann::json::object();
  fs::path base;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot open config " + f.config);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(f.config + ": " + e.what());
    }
    base = fs::path(f.config).parent_path();
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  if (f.seed) j["seed"] = *f.seed;
  if (!f.out.empty()) j["out"] = fs::absolute(f.out).string();
  if (!f.manifest.empty()) j["data"]["manifest"] = fs::absolute(f.manifest).string();
  if (f.val_fold) j["data"]["val_fold"] = *f.val_fold;
  if (!f.eval_folds.empty()) j["data"]["eval_folds"] = f.eval_folds;
  if (!f.preset.empty()) j["model"]["preset"] = f.preset;
  if (!f.pyramid.empty()) j["model"]["pyramid"] = f.pyramid;
  if (!f.stage5.empty()) j["model"]["stage5"] = f.stage5;
  if (f.epochs) j["train"]["epochs"] = *f.epochs;
  if (f.lr) j["train"]["lr0"] = *f.lr;
  if (f.batch) j["train"]["batch_size"] = *f.batch;
  if (f.chip) j["train"]["chip_px"] = *f.chip;
  if (f.steps) j["train"]["steps_per_epoch"] = *f.steps;
  if (f.scenes) j["data"]["synth"]["scenes"] = *f.scenes;
  if (f.tile) j["data"]["synth"]["tile_px"] = *f.tile;
  if (f.raster) j["data"]["synth"]["raster_px"] = *f.raster;
  return RunConfig::from_json(j, base);
}

void log_threads(bool deterministic) {
  const char* env = std::getenv("SCINET_NUM_THREADS");
  if (deterministic) set_num_threads(1);
  log_info("threads: " + std::to_string(num_threads()) + " (SCINET_NUM_THREADS=" + (env ? env : "unset") + ")" +
           (deterministic ? ", --deterministic" : ""));
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Scale-invariant building segmentation: synthesis, training, evaluation, inference, RF analysis"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&f](CLI::App* cmd) {
    cmd->add_option("--config", f.config, "JSON run config");
    cmd->add_option("--seed", f.seed, "top-level seed");
    cmd->add_option("--out", f.out, "output directory (config key: out)");
    cmd->add_flag("--deterministic", f.deterministic, "single worker thread");
    cmd->add_option("--preset", f.preset, "model preset: desk, paper, tiny");
    cmd->add_option("--pyramid", f.pyramid, "none, aspp, dense-aspp");
    cmd->add_option("--stage5", f.stage5, "strided or dilated-r2");
  };
  auto data_flags = [&f](CLI::App* cmd) {
    cmd->add_option("--manifest", f.manifest, "dataset manifest.jsonl");
    cmd->add_option("--val-fold", f.val_fold, "validation fold (default: last)");
  };

  auto* synth = app.add_subcommand("synth", "render a synthetic multi-resolution dataset");
  common(synth);
  synth->add_flag("--force", f.force, "replace a non-empty output directory");
  synth->add_option("--scenes", f.scenes, "number of scenes");
  synth->add_option("--tile", f.tile, "tile size in pixels");
  synth->add_option("--raster", f.raster, "base raster size in pixels");

  auto* train = app.add_subcommand("train", "train and keep the best validation checkpoint");
  common(train);
  data_flags(train);
  train->add_flag("--force", f.force, "overwrite an existing run directory");
  train->add_option("--epochs", f.epochs, "number of epochs");
  train->add_option("--lr", f.lr, "initial learning rate");
  train->add_option("--batch", f.batch, "batch size");
  train->add_option("--chip", f.chip, "chip size in pixels");
  train->add_option("--steps-per-epoch", f.steps, "optimizer steps per epoch (0: one pass)");

  auto* eval = app.add_subcommand("eval", "score a checkpoint: overall and per-resolution tables");
  common(eval);
  data_flags(eval);
  eval->add_option("--checkpoint", f.checkpoint, "checkpoint (default: <out>/best.ckpt)");
  eval->add_option("--folds", f.eval_folds, "folds to score, e.g. 3,4 (default: validation fold)")->delimiter(',');

  auto* infer = app.add_subcommand("infer", "full-scale mask for one image");
  common(infer);
  infer->add_option("--checkpoint", f.checkpoint, "checkpoint (default: <out>/best.ckpt)");
  infer->add_option("--image", f.image, "input PPM")->required();
  infer->add_option("--mask-out", f.mask_out, "output mask PGM (default: <out>/<image>.mask.pgm)");
  infer->add_option("--prob-out", f.prob_out, "optional probability PGM");

  auto* rf_cmd = app.add_subcommand("rf-report", "receptive-field and output-stride report");
  common(rf_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    log_threads(f.deterministic);
    const RunConfig config = build_config(f);
    const fs::path checkpoint = f.checkpoint.empty() ? config.out / "best.ckpt" : fs::path(f.checkpoint);
    if (*synth) {
      const Manifest m = cmd_synth(config, config.out, f.force);
      std::map<int, std::size_t> per;
      for (const auto& r : m.records) ++per[r.gsd_cm];
      std::cout << "wrote " << m.records.size() << " tiles to " << config.out.string() << "\n";
      for (const auto& [gsd, n] : per) std::cout << "  gsd " << gsd << " cm: " << n << " tiles\n";
    } else if (*train) {
      const FitResult r = cmd_train(config, f.force);
      std::cout << "best epoch " << r.best_epoch << ", validation micro-IoU " << r.best_metric << "\n"
                << "checkpoint " << (config.out / "best.ckpt").string() << "\n";
    } else if (*eval) {
      const EvalOutput out = cmd_eval(config, checkpoint, config.out);
      std::cout << out.table << "\nper resolution\n" << out.per_resolution_csv;
    } else if (*infer) {
      const fs::path mask_out =
          f.mask_out.empty() ? config.out / (fs::path(f.image).stem().string() + ".mask.pgm") : fs::path(f.mask_out);
      const Tensor mask = cmd_infer(config, checkpoint, f.image, mask_out, f.prob_out);
      double on = 0;
      for (float v : mask.data()) on += v;
      std::cout << "mask " << mask_out.string() << " (" << 100.0 * on / static_cast<double>(mask.numel())
                << "% building)\n";
    } else if (*rf_cmd) {
      const RfReport r = cmd_rf_report(config.model);
      std::cout << r.text;
      if (!f.out.empty()) {
        fs::create_directories(config.out);
        std::ofstream(config.out / "rf_report.json") << r.structured.dump(2) << '\n';
      }
      if (r.analyzer_stride != r.measured_stride) {
        log(LogLevel::Error, "analyzer stride disagrees with the forward pass");
        return 3;
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    log(LogLevel::Error, e.what());
    return 1;
  } catch (const ShapeError& e) {
    log(LogLevel::Error, e.what());
    return 1;
  } catch (const DataError& e) {
    log(LogLevel::Error, e.what());
    return 2;
  } catch (const CheckpointError& e) {
    log(LogLevel::Error, e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    log(LogLevel::Error, e.what());
    return 2;
  } catch (const NumericalError& e) {
    log(LogLevel::Error, e.what());
    return 3;
  } catch (const std::exception& e) {
    log(LogLevel::Error, e.what());
    return 1;
  }
}

}  // namespace scinet
