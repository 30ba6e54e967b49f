#include <cmath>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "probes.hpp"
#include "scinet/grad_check.hpp"
#include "scinet/layers.hpp"
#include "scinet/ops.hpp"
#include "scinet/parallel.hpp"

using namespace scinet;

namespace {

std::vector<float> no_bias;

Tensor ones(Shape s) { return Tensor(s, 1.0f); }

}  // namespace

TEST_SUITE("conv2d_forward") {
  TEST_CASE("all-ones 3x3 input and kernel, padding 1") {
    const auto y = conv2d_forward(ones({1, 1, 3, 3}), ones({1, 1, 3, 3}), std::span<const float>(no_bias),
                                  ConvParams::same(3));
    const auto ref = oracle::naive_conv(ones({1, 1, 3, 3}), ones({1, 1, 3, 3}), no_bias, ConvParams::same(3));
    CHECK(oracle::max_abs_diff(y, ref) == 0.0);
    CHECK(y.at(0, 0, 1, 1) == 9.0f);
    CHECK(y.at(0, 0, 0, 0) == 4.0f);
    CHECK(y.at(0, 0, 2, 2) == 4.0f);
    CHECK(y.at(0, 0, 0, 1) == 6.0f);
  }

  TEST_CASE("1x1 identity kernel returns the input") {
    Rng rng(1);
    const auto x = Tensor::randn({2, 1, 5, 7}, rng);
    const auto y = conv2d_forward(x, ones({1, 1, 1, 1}), std::span<const float>(no_bias), ConvParams::same(1));
    CHECK(oracle::max_abs_diff(x, y) == 0.0);
  }

  TEST_CASE("dilated 3x3 equals the zero-inserted 5x5 kernel at rate 1") {
    Rng rng(2);
    const auto x = Tensor::randn({1, 2, 9, 9}, rng);
    const auto w = Tensor::randn({3, 2, 3, 3}, rng);
    const auto dilated = conv2d_forward(x, w, std::span<const float>(no_bias), ConvParams{3, 3, 1, 1, 0, 0, 2});
    const auto wide = oracle::zero_insert_kernel(w, 2);
    REQUIRE(wide.shape() == Shape{3, 2, 5, 5});
    const auto plain = conv2d_forward(x, wide, std::span<const float>(no_bias), ConvParams{5, 5, 1, 1, 0, 0, 1});
    REQUIRE(dilated.shape() == Shape{1, 3, 5, 5});
    CHECK(oracle::max_abs_diff(dilated, plain) <= 1e-6);
  }

  TEST_CASE("matches the naive loop across strides, paddings, dilations and chunked im2col") {
    Rng rng(3);
    struct Case {
      Shape in;
      std::size_t out_c;
      ConvParams p;
    };
    const std::vector<Case> cases = {
        {{2, 3, 11, 9}, 4, ConvParams{3, 3, 2, 2, 1, 1, 1}},
        {{1, 2, 13, 13}, 3, ConvParams{3, 3, 1, 1, 3, 3, 3}},
        {{1, 5, 8, 8}, 7, ConvParams{1, 1, 1, 1, 0, 0, 1}},
        {{1, 2, 10, 12}, 2, ConvParams{3, 2, 1, 2, 2, 0, 2}},
        {{1, 64, 70, 66}, 5, ConvParams::same(3, 1, 2)},  // several im2col chunks
    };
    for (const auto& c : cases) {
      const auto x = Tensor::randn(c.in, rng);
      const auto w = Tensor::randn({c.out_c, c.in.c, c.p.kernel_h, c.p.kernel_w}, rng);
      std::vector<float> b(c.out_c);
      for (auto& v : b) v = static_cast<float>(rng.normal());
      const auto y = conv2d_forward(x, w, std::span<const float>(b), c.p);
      const auto ref = oracle::naive_conv(x, w, b, c.p);
      REQUIRE(y.shape() == ref.shape());
      CHECK(oracle::max_abs_diff(y, ref) <= 1e-3);
    }
  }

  TEST_CASE("channel mismatch names the offending dimensions") {
    try {
      conv2d_forward(ones({1, 3, 8, 8}), ones({4, 2, 3, 3}), std::span<const float>(no_bias), ConvParams::same(3));
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("3 channels") != std::string::npos);
      CHECK(msg.find("expect 2") != std::string::npos);
    }
    CHECK_THROWS_AS(conv2d_forward(ones({1, 1, 2, 2}), ones({1, 1, 3, 3}), std::span<const float>(no_bias),
                                   ConvParams{3, 3, 1, 1, 0, 0, 1}),
                    ShapeError);
  }

  TEST_CASE("dilation does not change the parameter count") {
    Conv2d<float> plain("plain", 16, 32, ConvParams::same(3, 1, 1), false);
    Conv2d<float> dilated("dilated", 16, 32, ConvParams::same(3, 1, 18), false);
    CHECK(plain.weight().numel() == dilated.weight().numel());
    CHECK(dilated.weight().numel() == 32u * 16u * 9u);
  }
}

TEST_SUITE("conv2d_backward") {
  TEST_CASE("zero upstream gradient gives zero gradients") {
    Rng rng(4);
    const auto x = Tensor::randn({2, 3, 6, 6}, rng);
    const auto w = Tensor::randn({4, 3, 3, 3}, rng);
    const auto g = conv2d_backward(Tensor({2, 4, 6, 6}), x, w, ConvParams::same(3));
    for (float v : g.input.data()) CHECK(v == 0.0f);
    for (float v : g.weights.data()) CHECK(v == 0.0f);
    for (float v : g.bias) CHECK(v == 0.0f);
  }

  TEST_CASE("gradients are linear in grad_out") {
    Rng rng(5);
    const auto x = Tensor::randn({2, 3, 8, 8}, rng);
    const auto w = Tensor::randn({4, 3, 3, 3}, rng);
    const auto p = ConvParams::same(3, 1, 2);
    auto dy = Tensor::randn({2, 4, 8, 8}, rng);
    const auto g1 = conv2d_backward(dy, x, w, p);
    dy *= 2.0f;
    const auto g2 = conv2d_backward(dy, x, w, p);
    for (std::size_t i = 0; i < g1.input.numel(); ++i) CHECK(g2.input[i] == doctest::Approx(2 * g1.input[i]).epsilon(1e-5));
    for (std::size_t i = 0; i < g1.weights.numel(); ++i)
      CHECK(g2.weights[i] == doctest::Approx(2 * g1.weights[i]).epsilon(1e-5));
    for (std::size_t i = 0; i < g1.bias.size(); ++i) CHECK(g2.bias[i] == doctest::Approx(2 * g1.bias[i]).epsilon(1e-5));
  }

  TEST_CASE("grad_out shape mismatch is rejected") {
    CHECK_THROWS_AS(conv2d_backward(Tensor({1, 4, 5, 5}), ones({1, 3, 6, 6}), ones({4, 3, 3, 3}), ConvParams::same(3)),
                    ShapeError);
  }

  TEST_CASE("2x3x8x8 input, 4x3x3x3 weights, rate 2: finite differences") {
    Rng rng(6);
    Conv2d<float> conv32("conv", 3, 4, ConvParams::same(3, 1, 2), true);
    conv32.init(rng);
    const auto x = Tensor::randn({2, 3, 8, 8}, rng);
    GradCheckOptions opt;
    opt.max_entries = 1000;
    const auto r32 = grad_check(conv32, x, opt);
    CHECK_MESSAGE(r32.passed, r32.message);

    Conv2d<double> conv64("conv", 3, 4, ConvParams::same(3, 1, 2), true);
    conv64.init(rng);
    opt.tolerance = 1e-6;
    const auto r64 = grad_check(conv64, x.cast<double>(), opt);
    CHECK_MESSAGE(r64.passed, r64.message);
  }

  TEST_CASE("results do not depend on the worker count") {
    Rng rng(7);
    const auto x = Tensor::randn({4, 6, 12, 12}, rng);
    const auto w = Tensor::randn({5, 6, 3, 3}, rng);
    const auto dy = Tensor::randn({4, 5, 12, 12}, rng);
    const auto p = ConvParams::same(3, 1, 2);
    const std::size_t saved = num_threads();
    set_num_threads(1);
    const auto y1 = conv2d_forward(x, w, std::span<const float>(no_bias), p);
    const auto g1 = conv2d_backward(dy, x, w, p);
    set_num_threads(3);
    const auto y3 = conv2d_forward(x, w, std::span<const float>(no_bias), p);
    const auto g3 = conv2d_backward(dy, x, w, p);
    set_num_threads(saved);
    CHECK(oracle::max_abs_diff(y1, y3) == 0.0);
    CHECK(oracle::max_abs_diff(g1.input, g3.input) == 0.0);
    CHECK(oracle::max_abs_diff(g1.weights, g3.weights) == 0.0);
  }
}

TEST_SUITE("batchnorm") {
  TEST_CASE("constant-per-channel input in train mode yields the shift") {
    BatchNormState<float> st(2);
    st.scale = {1.7f, -0.3f};
    st.shift = {0.25f, -1.5f};
    Tensor x({3, 2, 4, 4});
    for (std::size_t n = 0; n < 3; ++n) {
      std::fill(x.plane(n, 0), x.plane(n, 0) + 16, 5.0f);
      std::fill(x.plane(n, 1), x.plane(n, 1) + 16, -2.0f);
    }
    const auto y = batchnorm_forward(x, st, Mode::Train);
    for (std::size_t n = 0; n < 3; ++n) {
      for (std::size_t i = 0; i < 16; ++i) {
        CHECK(y.plane(n, 0)[i] == doctest::Approx(0.25));
        CHECK(y.plane(n, 1)[i] == doctest::Approx(-1.5));
      }
    }
  }

  TEST_CASE("standardized input passes through with unit scale and zero shift") {
    Rng rng(8);
    auto x = Tensor::randn({2, 3, 8, 8}, rng);
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0, var = 0;
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 64; ++i) mean += x.plane(n, c)[i];
      mean /= 128;
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 64; ++i) var += std::pow(x.plane(n, c)[i] - mean, 2);
      const double sd = std::sqrt(var / 128);
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 64; ++i) x.plane(n, c)[i] = static_cast<float>((x.plane(n, c)[i] - mean) / sd);
    }
    BatchNormState<float> st(3);
    const auto y = batchnorm_forward(x, st, Mode::Train);
    // epsilon = 1e-5 alone shrinks values by a factor 1/sqrt(1 + 1e-5)
    for (std::size_t i = 0; i < x.numel(); ++i) {
      CHECK(std::abs(y[i] - x[i]) <= 1e-5 * std::max(1.0f, std::abs(x[i])));
    }
  }

  TEST_CASE("train mode updates running statistics; eval mode uses them") {
    Rng rng(9);
    const auto x = Tensor::randn({4, 1, 4, 4}, rng, 2.0);
    BatchNormState<float> st(1);
    batchnorm_forward(x, st, Mode::Train);
    CHECK(st.running_mean[0] != 0.0f);
    CHECK(st.running_var[0] > 0.0f);
    st.running_mean[0] = 1.0f;
    st.running_var[0] = 4.0f;
    const auto y = batchnorm_forward(x, st, Mode::Eval);
    CHECK(y[0] == doctest::Approx((x[0] - 1.0) / std::sqrt(4.0 + 1e-5)).epsilon(1e-5));
  }

  TEST_CASE("zero-size batch in train mode is an error") {
    BatchNormState<float> st(2);
    CHECK_THROWS_AS(batchnorm_forward(Tensor({0, 2, 4, 4}), st, Mode::Train), ShapeError);
    CHECK_THROWS_AS(batchnorm_forward(Tensor({1, 3, 4, 4}), st, Mode::Train), ShapeError);
  }

  TEST_CASE("backward matches finite differences in both modes") {
    Rng rng(10);
    BatchNorm2d<float> bn("bn", 3);
    for (std::size_t c = 0; c < 3; ++c) {
      bn.state().scale[c] = static_cast<float>(0.5 + rng.uniform());
      bn.state().shift[c] = static_cast<float>(rng.normal());
    }
    const auto x = Tensor::randn({2, 3, 5, 5}, rng);
    auto r = grad_check(bn, x, GradCheckOptions{});
    CHECK_MESSAGE(r.passed, r.message);
    bn.set_mode(Mode::Eval);
    r = grad_check(bn, x, GradCheckOptions{});
    CHECK_MESSAGE(r.passed, r.message);
  }
}

TEST_SUITE("upsample_bilinear_2x") {
  TEST_CASE("constant input stays constant") {
    const auto y = upsample_bilinear_2x(Tensor({1, 2, 3, 5}, 1.25f));
    REQUIRE(y.shape() == Shape{1, 2, 6, 10});
    for (float v : y.data()) CHECK(v == 1.25f);
  }

  TEST_CASE("[0, 2] row, half-pixel convention") {
    const Tensor x({1, 1, 1, 2}, std::vector<float>{0.0f, 2.0f});
    const auto ref = oracle::naive_bilinear(x, 2);
    // Frozen from the interpolation oracle above.
    const std::vector<float> expected = {0.0f, 0.5f, 1.5f, 2.0f};
    const auto y = upsample_bilinear_2x(x);
    REQUIRE(y.shape() == Shape{1, 1, 2, 4});
    for (std::size_t row = 0; row < 2; ++row) {
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(ref.at(0, 0, row, j) == doctest::Approx(expected[j]));
        CHECK(y.at(0, 0, row, j) == doctest::Approx(expected[j]));
      }
    }
  }

  TEST_CASE("agrees with the generic interpolation oracle on random input") {
    Rng rng(11);
    const auto x = Tensor::randn({2, 3, 5, 7}, rng);
    CHECK(oracle::max_abs_diff(upsample_bilinear_2x(x), oracle::naive_bilinear(x, 2)) <= 1e-5);
  }

  TEST_CASE("backward is the adjoint of forward") {
    Rng rng(12);
    for (std::size_t trial = 0; trial < 5; ++trial) {
      const auto x = Tensor::randn({2, 3, 4 + trial, 3 + trial}, rng);
      const auto y = Tensor::randn({2, 3, 2 * (4 + trial), 2 * (3 + trial)}, rng);
      const auto ux = upsample_bilinear_2x(x);
      const auto by = upsample_bilinear_2x_backward(y);
      double lhs = 0, rhs = 0;
      for (std::size_t i = 0; i < ux.numel(); ++i) lhs += static_cast<double>(ux[i]) * y[i];
      for (std::size_t i = 0; i < x.numel(); ++i) rhs += static_cast<double>(x[i]) * by[i];
      CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(1.0, std::abs(lhs)));
    }
  }
}

TEST_SUITE("elementwise and pooling") {
  TEST_CASE("relu") {
    const auto y = relu(Tensor({1, 1, 1, 3}, std::vector<float>{-1.0f, 0.0f, 2.0f}));
    CHECK(y[0] == 0.0f);
    CHECK(y[1] == 0.0f);
    CHECK(y[2] == 2.0f);
    const auto n = relu(Tensor({1, 1, 1, 1}, std::vector<float>{std::numeric_limits<float>::quiet_NaN()}));
    CHECK(std::isnan(n[0]));
  }

  TEST_CASE("global average pool of a constant channel") {
    Tensor x({2, 2, 3, 3});
    std::fill(x.plane(0, 0), x.plane(0, 0) + 9, 4.5f);
    std::fill(x.plane(0, 1), x.plane(0, 1) + 9, -1.0f);
    const auto p = global_avg_pool(x);
    REQUIRE(p.shape() == Shape{2, 2, 1, 1});
    CHECK(p.at(0, 0, 0, 0) == doctest::Approx(4.5));
    CHECK(p.at(0, 1, 0, 0) == doctest::Approx(-1.0));
    CHECK(p.at(1, 0, 0, 0) == 0.0f);
  }

  TEST_CASE("concat of 888 and 1024 channels gives 1912") {
    const Tensor a({1, 888, 32, 32});
    const Tensor b({1, 1024, 32, 32});
    CHECK(concat_channels<float>({&a, &b}).shape() == Shape{1, 1912, 32, 32});
  }

  TEST_CASE("concat with mismatched spatial dims is an error") {
    const Tensor a({1, 2, 8, 8});
    const Tensor b({1, 2, 8, 4});
    CHECK_THROWS_AS(concat_channels<float>({&a, &b}), ShapeError);
  }

  TEST_CASE("split_channels inverts concat") {
    Rng rng(13);
    const auto a = Tensor::randn({2, 3, 4, 4}, rng);
    const auto b = Tensor::randn({2, 5, 4, 4}, rng);
    const auto parts = split_channels(concat_channels<float>({&a, &b}), {3, 5});
    CHECK(oracle::max_abs_diff(parts[0], a) == 0.0);
    CHECK(oracle::max_abs_diff(parts[1], b) == 0.0);
  }

  TEST_CASE("backwards of relu, sigmoid, concat and pooling pass finite differences") {
    Rng rng(14);
    ReLU<float> r;
    Sigmoid<float> s;
    probe::ConcatProbe<float> cat(Tensor::randn({2, 3, 5, 5}, rng));
    probe::PoolBroadcastProbe<float> pool;
    const auto x = probe::away_from_zero<float>({2, 4, 5, 5}, rng);
    for (Differentiable<float>* layer : std::vector<Differentiable<float>*>{&r, &s, &pool}) {
      const auto rep = grad_check(*layer, x, GradCheckOptions{});
      CHECK_MESSAGE(rep.passed, rep.message);
    }
    const auto rep = grad_check(cat, Tensor::randn({2, 2, 5, 5}, rng), GradCheckOptions{});
    CHECK_MESSAGE(rep.passed, rep.message);
  }
}

TEST_SUITE("grad_check") {
  TEST_CASE("identity 1x1 conv has ~zero error") {
    Conv2d<double> conv("id", 1, 1, ConvParams::same(1), false);
    conv.weight()[0] = 1.0;
    Rng rng(15);
    GradCheckOptions opt;
    opt.tolerance = 1e-6;
    const auto r = grad_check(conv, TensorD::randn({1, 1, 4, 4}, rng), opt);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-8);
  }

  TEST_CASE("a sign-flipped backward fails") {
    probe::FunctionProbe<float> bad(
        "relu_with_sign_bug", [](const Tensor& x) { return relu(x); },
        [](const Tensor& x, const Tensor& g) {
          auto d = relu_backward(g, x);
          d *= -1.0f;
          return d;
        });
    Rng rng(16);
    const auto r = grad_check(bad, probe::away_from_zero<float>({1, 2, 4, 4}, rng), GradCheckOptions{});
    CHECK_FALSE(r.passed);
    CHECK(r.max_rel_error > 1.0);
  }

  TEST_CASE("a single flipped entry fails") {
    probe::FunctionProbe<float> bad(
        "sigmoid_with_one_flip", [](const Tensor& x) { return sigmoid(x); },
        [](const Tensor& x, const Tensor& g) {
          auto d = sigmoid_backward(g, sigmoid(x));
          std::size_t worst = 0;
          for (std::size_t i = 0; i < d.numel(); ++i)
            if (std::abs(d[i]) > std::abs(d[worst])) worst = i;
          d[worst] = -d[worst];
          return d;
        });
    Rng rng(17);
    const auto x = Tensor::randn({1, 1, 4, 4}, rng);
    CHECK_FALSE(grad_check(bad, x, GradCheckOptions{}).passed);

    // re-measuring at smaller steps does not rescue a wrong gradient
    GradCheckOptions retry;
    retry.retry_steps = {0.25, 0.0625};
    CHECK_FALSE(grad_check(bad, x, retry).passed);
  }

  TEST_CASE("float32 layer against a float64 reference") {
    Rng rng(20);
    Conv2d<float> conv("c", 2, 3, ConvParams::same(3, 1, 2), true);
    conv.init(rng);
    Conv2d<double> twin("c", 2, 3, ConvParams::same(3, 1, 2), true);  // weights are copied over
    GradCheckOptions opt;
    const auto x = Tensor::randn({2, 2, 6, 6}, rng);
    const auto r = grad_check_with_reference(conv, twin, x, opt);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-4);
    CHECK(twin.weight()[5] == static_cast<double>(conv.weight()[5]));

    probe::FunctionProbe<float> bad(
        "sigmoid_times_1.01", [](const Tensor& t) { return sigmoid(t); },
        [](const Tensor& t, const Tensor& g) {
          auto d = sigmoid_backward(g, sigmoid(t));
          d *= 1.01f;
          return d;
        });
    probe::FunctionProbe<double> good(
        "sigmoid", [](const TensorD& t) { return sigmoid(t); },
        [](const TensorD& t, const TensorD& g) { return sigmoid_backward(g, sigmoid(t)); });
    const auto rb = grad_check_with_reference(bad, good, x, opt);
    CHECK_FALSE(rb.passed);
    CHECK(rb.max_rel_error == doctest::Approx(0.0099).epsilon(0.05));

    Conv2d<double> wrong_shape("c", 2, 4, ConvParams::same(3), true);
    CHECK_THROWS_AS(grad_check_with_reference(conv, wrong_shape, x, opt), ShapeError);
  }

  TEST_CASE("a structurally zero gradient is measured against the layer's scale") {
    // conv bias followed by train-mode batch norm: the norm removes any
    // per-channel constant, so d/d(bias) is exactly zero
    struct BiasThenNorm final : Differentiable<double> {
      Conv2d<double> conv{"conv", 2, 2, ConvParams::same(3), true};
      BatchNorm2d<double> bn{"bn", 2};
      std::string name() const override { return "bias_then_norm"; }
      TensorD forward(const TensorD& x) override { return bn.forward(conv.forward(x)); }
      TensorD backward(const TensorD& g) override { return conv.backward(bn.backward(g)); }
      std::vector<ParamView<double>> parameters() override {
        auto p = conv.parameters();
        for (auto& q : bn.parameters()) p.push_back(q);
        return p;
      }
    } layer;
    Rng rng(21);
    layer.conv.init(rng);
    const auto x = TensorD::randn({2, 2, 5, 5}, rng);
    GradCheckOptions opt;
    opt.tolerance = 1e-6;
    CHECK(grad_check(layer, x, opt).passed);
    for (double g : layer.conv.parameters()[1].grad) CHECK(std::abs(g) < 1e-12);

    opt.scale_floor = 0.0;  // roundoff against roundoff
    CHECK_FALSE(grad_check(layer, x, opt).passed);
  }

  TEST_CASE("five-point stencil agrees on smooth layers") {
    probe::FunctionProbe<double> smooth(
        "sigmoid", [](const TensorD& x) { return sigmoid(x); },
        [](const TensorD& x, const TensorD& g) { return sigmoid_backward(g, sigmoid(x)); });
    Rng rng(19);
    GradCheckOptions opt;
    opt.five_point = true;
    opt.step = 1e-3;
    opt.tolerance = 1e-9;
    CHECK(grad_check(smooth, TensorD::randn({1, 2, 3, 3}, rng), opt).passed);
  }

  TEST_CASE("non-finite values fail with a location") {
    probe::FunctionProbe<float> nan_layer(
        "nan", [](const Tensor& x) { return x; },
        [](const Tensor&, const Tensor& g) {
          auto d = g;
          d[3] = std::nanf("");
          return d;
        });
    Rng rng(18);
    const auto r = grad_check(nan_layer, Tensor::randn({1, 1, 2, 3}, rng), GradCheckOptions{});
    CHECK_FALSE(r.passed);
    CHECK_FALSE(r.finite);
    CHECK(r.worst_index == 3);
  }
}

TEST_CASE("finite checks report the first non-finite element") {
  set_finite_checks(true);
  Tensor x({1, 1, 2, 2});
  x[2] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(check_finite(x, "probe"), NumericalError);
  set_finite_checks(false);
  CHECK_NOTHROW(check_finite(x, "probe"));
}
