#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "scinet/checkpoint.hpp"
#include "scinet/errors.hpp"
#include "scinet/grad_check.hpp"
#include "scinet/model.hpp"
#include "scinet/rf.hpp"

using namespace scinet;

namespace {

/// Smallest config that still has every structural feature; used in 64-bit checks.
ModelConfig micro_config(PyramidKind pyramid, Stage5Mode mode) {
  ModelConfig c;
  c.stage_widths = {2, 3, 3, 4, 4};
  c.stage_blocks = {1, 1, 1, 1, 2};
  c.stage5 = mode;
  c.pyramid = pyramid;
  c.rates = pyramid == PyramidKind::Aspp ? std::vector<int>{2, 3} : std::vector<int>{1, 2};
  c.branch_channels = 2;
  c.decoder_widths = {3, 3, 2, 2};
  return c;
}

template <typename T>
std::vector<unsigned char> parameter_bytes(Model<T>& m) {
  std::vector<unsigned char> out;
  for (const auto& p : m.parameters()) {
    const auto* b = reinterpret_cast<const unsigned char*>(p.value.data());
    out.insert(out.end(), b, b + p.value.size_bytes());
  }
  return out;
}

Tensor random_image(std::size_t n, std::size_t hw, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::uniform(Shape{n, 3, hw, hw}, rng, 0.0, 1.0);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)) == 0;
}

/// Replaces each kernel by the average of itself and its left-right mirror.
template <typename T>
void symmetrize_kernels(Differentiable<T>& layer) {
  for (auto& p : layer.parameters()) {
    if (p.name.find(".weight") == std::string::npos || p.shape.w == 1) continue;
    for (std::size_t o = 0; o < p.shape.n * p.shape.c * p.shape.h; ++o) {
      T* row = p.value.data() + o * p.shape.w;
      for (std::size_t v = 0; v < p.shape.w / 2; ++v) {
        const T m = (row[v] + row[p.shape.w - 1 - v]) / 2;
        row[v] = row[p.shape.w - 1 - v] = m;
      }
    }
  }
}

template <typename T>
BasicTensor<T> hflip(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  const Shape& s = x.shape();
  for (std::size_t p = 0; p < s.n * s.c * s.h; ++p)
    for (std::size_t j = 0; j < s.w; ++j) y[p * s.w + j] = x[p * s.w + s.w - 1 - j];
  return y;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("scinet_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST_CASE("build_model is deterministic per seed") {
  const auto cfg = ModelConfig::tiny();
  Model<float> a(cfg, 7), b(cfg, 7), c(cfg, 8);
  CHECK(parameter_bytes(a) == parameter_bytes(b));
  CHECK(parameter_bytes(a) != parameter_bytes(c));
  CHECK(a.parameter_count() == c.parameter_count());
}

TEST_CASE("invalid configs are rejected") {
  auto cfg = ModelConfig::tiny();
  cfg.stage_widths[2] = 0;
  CHECK_THROWS_AS(Model<float>(cfg, 0), ConfigError);
  cfg = ModelConfig::tiny();
  cfg.rates.clear();
  CHECK_THROWS_AS(Model<float>(cfg, 0), ConfigError);
  cfg = ModelConfig::tiny();
  cfg.rates = {3, 0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("config json round trip and strictness") {
  for (const auto& cfg : {ModelConfig::desk(), ModelConfig::paper(), ModelConfig::tiny(),
                          ModelConfig::tiny().ablation_baseline()}) {
    CHECK(ModelConfig::from_json(cfg.to_json()) == cfg);
  }
  CHECK(ModelConfig::from_json({{"preset", "paper"}}).stage_widths[4] == 888);
  CHECK(ModelConfig::from_json({{"pyramid", "aspp"}}).rates == std::vector<int>{8, 12, 18});
  CHECK_THROWS_AS(ModelConfig::from_json({{"stage_width", {1, 2, 3, 4, 5}}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"pyramid", "pspnet"}}), ConfigError);
  CHECK(ModelConfig::tiny().digest() != ModelConfig::tiny().ablation_baseline().digest());
}

TEST_CASE("paper preset channel arithmetic") {
  Model<float> m(ModelConfig::paper(), 0);
  REQUIRE(m.dense_aspp() != nullptr);
  CHECK(m.config().stage_widths[4] == 888);
  CHECK(m.dense_aspp()->branch_input_channels() == std::vector<std::size_t>{888, 1144, 1400, 1656});
  CHECK(m.dense_aspp()->concat_width() == 1912);

  m.set_caching(false);
  m.set_mode(Mode::Eval);
  const auto out = m.forward(random_image(1, 64, 1));
  CHECK(m.trace().stages[4] == Shape{1, 888, 4, 4});
  CHECK(m.trace().pyramid_concat == Shape{1, 1912, 4, 4});
  CHECK(out.shape() == Shape{1, 1, 64, 64});
}

TEST_CASE("encoder stage shapes") {
  SUBCASE("dilated stage 5 shares stage 4's resolution") {
    Model<float> m(ModelConfig::tiny(), 0);
    const auto st = m.encode(random_image(1, 64, 2));
    const std::size_t expect[5] = {32, 16, 8, 4, 4};
    for (std::size_t s = 0; s < 5; ++s) {
      CHECK(st[s].shape().h == expect[s]);
      CHECK(st[s].shape().w == expect[s]);
      CHECK(st[s].shape().c == ModelConfig::tiny().stage_widths[s]);
    }
  }
  SUBCASE("strided stage 5 halves again") {
    Model<float> m(ModelConfig::tiny().ablation_baseline(), 0);
    const auto st = m.encode(random_image(1, 64, 2));
    CHECK(st[4].shape().h == 2);
  }
  SUBCASE("input dims must be multiples of 32") {
    Model<float> m(ModelConfig::tiny(), 0);
    CHECK_THROWS_AS(m.encode(random_image(1, 48, 2)), ShapeError);
    Rng rng(0);
    CHECK_THROWS_AS(m.encode(Tensor::uniform(Shape{1, 1, 64, 64}, rng, 0, 1)), ShapeError);
  }
}

TEST_CASE("analyzer stride equals the measured stage-5 ratio") {
  for (auto mode : {Stage5Mode::Strided, Stage5Mode::DilatedR2}) {
    for (auto pyramid : {PyramidKind::None, PyramidKind::Aspp, PyramidKind::DenseAspp}) {
      auto cfg = ModelConfig::tiny();
      cfg.stage5 = mode;
      cfg.pyramid = pyramid;
      cfg.stage_blocks = {1, 2, 1, 1, 3};
      Model<float> m(cfg, 0);
      const auto st = m.encode(random_image(1, 96, 3));
      const auto rf_state = rf::analyze_chain(m.encoder_layer_specs()).back();
      CHECK(rf_state.output_stride == static_cast<std::int64_t>(96 / st[4].shape().h));
      CHECK(rf_state.output_stride == static_cast<std::int64_t>(cfg.output_stride()));
    }
  }
}

TEST_CASE("pyramid shapes") {
  SUBCASE("dense pyramid preserves spatial dims and projects to the first decoder width") {
    auto cfg = ModelConfig::tiny();
    Model<float> m(cfg, 0);
    m.forward(random_image(2, 64, 4));
    CHECK(m.trace().pyramid_concat == Shape{2, 64 + 4 * 16, 4, 4});
    CHECK(m.trace().pyramid_out == Shape{2, cfg.decoder_widths[0], 4, 4});
  }
  SUBCASE("single rate degenerates to one branch") {
    auto cfg = ModelConfig::tiny();
    cfg.rates = {3};
    Model<float> m(cfg, 0);
    CHECK(m.dense_aspp()->branch_input_channels() == std::vector<std::size_t>{64});
    m.forward(random_image(2, 64, 4));
    CHECK(m.trace().pyramid_concat.c == 64 + 16);
  }
  SUBCASE("parallel pyramid concatenates five branches") {
    auto cfg = ModelConfig::tiny();
    cfg.pyramid = PyramidKind::Aspp;
    cfg.rates = {8, 12, 18};
    Model<float> m(cfg, 0);
    m.forward(random_image(2, 64, 4));
    CHECK(m.trace().pyramid_concat == Shape{2, 5 * 16, 4, 4});
  }
  SUBCASE("no pyramid hands stage 5 straight to the decoder") {
    Model<float> m(ModelConfig::tiny().ablation_baseline(), 0);
    m.forward(random_image(2, 64, 4));
    CHECK(m.trace().pyramid_concat.numel() == 0);
    CHECK(m.trace().pyramid_out == Shape{2, 64, 2, 2});
  }
}

TEST_CASE("dense pyramid parameter count does not depend on rates") {
  auto cfg = ModelConfig::tiny();
  const std::size_t in = cfg.stage_widths[4], bc = cfg.branch_channels, out = cfg.decoder_widths[0];
  std::size_t expected = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    expected += (in + i * bc) * bc + 2 * bc;  // 1x1 reduce + norm
    expected += bc * bc * 9 + 2 * bc;         // dilated 3x3 + norm
  }
  expected += (in + 4 * bc) * out + 2 * out;  // projection + norm

  auto without = cfg.ablation_baseline();
  without.stage5 = cfg.stage5;
  const std::size_t base = Model<float>(without, 0).parameter_count();
  for (const std::vector<int>& rates : {std::vector<int>{3, 6, 12, 18}, std::vector<int>{1, 1, 1, 1},
                                        std::vector<int>{2, 5, 9, 30}}) {
    cfg.rates = rates;
    Model<float> m(cfg, 0);
    // the decoder's first block consumes `out` channels instead of the raw stage-5 width
    const std::size_t decoder_delta = (out - in) * cfg.decoder_widths[0] * 9;
    CHECK(m.parameter_count() == base + expected + decoder_delta);
  }
}

TEST_CASE("decoder") {
  SUBCASE("output is a probability map at input resolution") {
    for (auto cfg : {ModelConfig::tiny(), ModelConfig::tiny().ablation_baseline()}) {
      Model<float> m(cfg, 5);
      const auto out = m.forward(random_image(2, 64, 6));
      CHECK(out.shape() == Shape{2, 1, 64, 64});
      for (float v : out.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
    }
  }
  SUBCASE("block 1 fuses at stage-4 resolution, upsampling first only when strided") {
    Model<float> dilated(ModelConfig::tiny(), 0);
    dilated.forward(random_image(1, 64, 6));
    CHECK(dilated.trace().pyramid_out.h == dilated.trace().stages[3].h);
    CHECK(dilated.trace().decoder_concat[0].h == 4);

    Model<float> strided(ModelConfig::tiny().ablation_baseline(), 0);
    strided.forward(random_image(1, 64, 6));
    CHECK(strided.trace().pyramid_out.h == 2);
    CHECK(strided.trace().decoder_concat[0].h == 4);
    const std::size_t expect[4] = {4, 8, 16, 32};
    for (std::size_t i = 0; i < 4; ++i) CHECK(strided.trace().decoder_concat[i].h == expect[i]);
  }
  SUBCASE("mismatched skip resolution is an error") {
    Model<float> m(ModelConfig::tiny(), 0);
    auto st = m.encode(random_image(1, 64, 6));
    auto p = m.apply_pyramid(st[4]);
    st[3] = Tensor(Shape{1, st[3].shape().c, 8, 8});
    CHECK_THROWS_AS(m.decode(p, st), ShapeError);
  }
}

TEST_CASE("full-model gradients match finite differences (64-bit)") {
  // The projected loss sums ~8k outputs, leaving ~1e-14 of roundoff in it.
  // Parameters whose gradient nearly cancels (|g| ~ 1e-3) then show ~1e-5
  // relative noise at any step small enough to avoid ReLU kinks, so the
  // whole-model bound is looser than the per-layer 1e-6.
  GradCheckOptions opt;
  opt.tolerance = 1e-4;
  opt.step = 3e-6;
  opt.retry_steps = {0.25, 0.0625};
  opt.max_entries = 12;
  for (auto pyramid : {PyramidKind::None, PyramidKind::Aspp, PyramidKind::DenseAspp}) {
    for (auto mode : {Stage5Mode::Strided, Stage5Mode::DilatedR2}) {
      CAPTURE(to_string(pyramid));
      CAPTURE(to_string(mode));
      Model<double> m(micro_config(pyramid, mode), 11);
      Rng rng(12);
      const auto x = TensorD::randn(Shape{2, 3, 64, 64}, rng, 1.0);
      opt.seed = 13;
      const auto report = grad_check(m, x, opt);
      CHECK_MESSAGE(report.passed, report.message);
    }
  }
}

TEST_CASE("every parameter receives gradient") {
  for (auto pyramid : {PyramidKind::None, PyramidKind::Aspp, PyramidKind::DenseAspp}) {
    auto cfg = ModelConfig::tiny();
    cfg.pyramid = pyramid;
    Model<float> m(cfg, 21);
    m.zero_grad();
    const auto out = m.forward(random_image(2, 64, 22));
    Rng rng(23);
    m.backward(Tensor::randn(out.shape(), rng, 1.0));
    for (const auto& p : m.parameters()) {
      bool nonzero = false;
      for (float g : p.grad) nonzero = nonzero || g != 0.0f;
      CHECK_MESSAGE(nonzero, p.name);
    }
  }
}

TEST_CASE("stride-1 parts are flip-equivariant with mirror-symmetric kernels") {
  // Stride-2 3x3 convs on even-sized inputs sample a grid that is not
  // mirror-symmetric, so the check targets the resolution-preserving modules.
  Rng rng(31);
  const auto x = TensorD::randn(Shape{2, 8, 12, 12}, rng, 1.0);

  SUBCASE("dense pyramid") {
    DenseAspp<double> d(8, {1, 2, 3}, 4, 6);
    for (auto* u : d.units()) {
      u->init(rng);
      symmetrize_kernels(*u);
    }
    const auto a = hflip(d.forward(x));
    const auto b = d.forward(hflip(x));
    for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(std::abs(a[i] - b[i]) < 1e-4);
  }
  SUBCASE("parallel pyramid") {
    Aspp<double> p(8, {2, 3, 4}, 4, 6);
    p.init(rng);
    for (auto* u : p.units()) symmetrize_kernels(*u);
    const auto a = hflip(p.forward(x));
    const auto b = p.forward(hflip(x));
    for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(std::abs(a[i] - b[i]) < 1e-4);
  }
  SUBCASE("decoder block with bilinear upsampling") {
    DecoderBlock<double> blk("blk", 8, 4, 5, true);
    for (auto* u : blk.units()) {
      u->init(rng);
      symmetrize_kernels(*u);
    }
    const auto skip = TensorD::randn(Shape{2, 4, 24, 24}, rng, 1.0);
    const auto a = hflip(blk.forward(x, skip));
    const auto b = blk.forward(hflip(x), hflip(skip));
    for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(std::abs(a[i] - b[i]) < 1e-4);
  }
  SUBCASE("stride-2 blocks are equivariant on odd widths") {
    ConvBnRelu<double> c("c", 8, 4, ConvParams::same(3, 2));
    c.init(rng);
    symmetrize_kernels(c);
    const auto odd = TensorD::randn(Shape{2, 8, 13, 13}, rng, 1.0);
    const auto a = hflip(c.forward(odd));
    const auto b = c.forward(hflip(odd));
    for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(std::abs(a[i] - b[i]) < 1e-4);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto path = temp_path("roundtrip.ckpt");
  auto cfg = ModelConfig::tiny();
  Model<float> m(cfg, 41);
  m.forward(random_image(2, 64, 42));  // moves the running statistics off their defaults
  m.set_mode(Mode::Eval);
  const auto x = random_image(1, 64, 43);
  const auto before = m.forward(x);
  save_checkpoint(m, path);

  auto loaded = load_checkpoint(path, cfg);
  loaded->set_mode(Mode::Eval);
  CHECK(bitwise_equal(loaded->forward(x), before));
  CHECK(parameter_bytes(*loaded) == parameter_bytes(m));

  auto from_file_config = load_checkpoint(path);
  CHECK(from_file_config->config() == cfg);

  // serialization is a pure function of the contents
  const auto bytes = serialize(capture(m));
  CHECK(bytes == serialize(deserialize(bytes)));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint optimizer section and metadata") {
  Model<float> m(ModelConfig::tiny(), 1);
  auto ck = capture(m);
  ck.best_metric = 0.625;
  ck.best_epoch = 3;
  ck.has_optimizer = true;
  ck.optimizer_step = 17;
  ck.optimizer.push_back({"adam.m.head.weight", Shape{1, 2, 1, 1}, {0.5f, -0.25f}});
  const auto back = deserialize(serialize(ck));
  CHECK(back.best_metric == 0.625);
  CHECK(back.best_epoch == 3);
  CHECK(back.optimizer_step == 17);
  REQUIRE(back.optimizer.size() == 1);
  CHECK(back.optimizer[0].values == std::vector<float>{0.5f, -0.25f});
}

TEST_CASE("checkpoint errors") {
  const auto path = temp_path("errors.ckpt");
  Model<float> m(ModelConfig::tiny(), 2);
  save_checkpoint(m, path);

  SUBCASE("altered stage width names the first mismatching parameter") {
    auto cfg = ModelConfig::tiny();
    cfg.stage_widths[1] = 20;
    try {
      load_checkpoint(path, cfg);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("encoder.stage2.block0.conv.weight") != std::string::npos);
    }
  }
  SUBCASE("config difference without array differences names the keys") {
    auto cfg = ModelConfig::tiny();
    cfg.rates = {2, 4, 8, 16};
    try {
      load_checkpoint(path, cfg);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("rates") != std::string::npos);
    }
  }
  SUBCASE("truncation and corruption") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (std::size_t keep : {std::size_t{0}, std::size_t{5}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
      CHECK_THROWS_AS(deserialize(bytes.substr(0, keep)), CheckpointError);
    }
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    CHECK_THROWS_AS(deserialize(flipped), CheckpointError);
    auto bad_version = bytes;
    bad_version[8] = 9;
    CHECK_THROWS_AS(deserialize(bad_version), CheckpointError);

    const auto truncated = temp_path("truncated.ckpt");
    std::ofstream(truncated, std::ios::binary) << bytes.substr(0, bytes.size() - 100);
    std::unique_ptr<Model<float>> result;
    CHECK_THROWS_AS(result = load_checkpoint(truncated), CheckpointError);
    CHECK(result == nullptr);
    std::filesystem::remove(truncated);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_checkpoint(temp_path("missing.ckpt")), CheckpointError); }
  std::filesystem::remove(path);
}
