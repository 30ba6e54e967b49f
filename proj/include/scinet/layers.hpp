#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "scinet/ops.hpp"

namespace scinet {

/// Named view of a trainable array (value + gradient) or of a buffer
/// (running statistics; `grad` empty). Used by the optimizer, checkpoints and
/// gradient checks.
template <typename T>
struct ParamView {
  std::string name;
  Shape shape;
  std::span<T> value;
  std::span<T> grad;
};

/// A layer with a single input that can be run forward and differentiated.
/// backward() refers to the most recent forward() and *accumulates* into the
/// parameter gradients.
template <typename T>
class Differentiable {
 public:
  virtual ~Differentiable() = default;
  virtual std::string name() const = 0;
  virtual BasicTensor<T> forward(const BasicTensor<T>& input) = 0;
  virtual BasicTensor<T> backward(const BasicTensor<T>& grad_out) = 0;
  virtual std::vector<ParamView<T>> parameters() { return {}; }
  virtual std::vector<ParamView<T>> buffers() { return {}; }

  void zero_grad() {
    for (auto& p : parameters()) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }
};

template <typename T>
class Conv2d final : public Differentiable<T> {
 public:
  Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, ConvParams params, bool with_bias);

  std::string name() const override { return name_; }
  BasicTensor<T> forward(const BasicTensor<T>& input) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  std::vector<ParamView<T>> parameters() override;

  /// Fan-in scaled normal init: std = sqrt(2 / (in * k_h * k_w)); bias zero.
  void init(Rng& rng);
  /// Drops the saved input; subsequent backward() throws.
  void release() { saved_input_ = {}; }
  void set_caching(bool enabled) { caching_ = enabled; }

  const ConvParams& params() const { return params_; }
  BasicTensor<T>& weight() { return weight_; }
  const BasicTensor<T>& weight() const { return weight_; }
  std::vector<T>& bias() { return bias_; }
  std::size_t in_channels() const { return weight_.shape().c; }
  std::size_t out_channels() const { return weight_.shape().n; }

 private:
  std::string name_;
  ConvParams params_;
  BasicTensor<T> weight_, weight_grad_;
  std::vector<T> bias_, bias_grad_;
  BasicTensor<T> saved_input_;
  bool caching_ = true;
};

template <typename T>
class BatchNorm2d final : public Differentiable<T> {
 public:
  BatchNorm2d(std::string name, std::size_t channels);

  std::string name() const override { return name_; }
  BasicTensor<T> forward(const BasicTensor<T>& input) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  std::vector<ParamView<T>> parameters() override;
  std::vector<ParamView<T>> buffers() override;

  void set_mode(Mode mode) { mode_ = mode; }
  Mode mode() const { return mode_; }
  void set_caching(bool enabled) { caching_ = enabled; }
  BatchNormState<T>& state() { return state_; }

 private:
  std::string name_;
  BatchNormState<T> state_;
  std::vector<T> scale_grad_, shift_grad_;
  BatchNormCache<T> cache_;
  Mode mode_ = Mode::Train;
  bool caching_ = true;
};

template <typename T>
class ReLU final : public Differentiable<T> {
 public:
  std::string name() const override { return "relu"; }
  BasicTensor<T> forward(const BasicTensor<T>& input) override {
    input_ = input;
    return relu(input);
  }
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override { return relu_backward(grad_out, input_); }

 private:
  BasicTensor<T> input_;
};

template <typename T>
class Sigmoid final : public Differentiable<T> {
 public:
  std::string name() const override { return "sigmoid"; }
  BasicTensor<T> forward(const BasicTensor<T>& input) override {
    output_ = sigmoid(input);
    return output_;
  }
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override { return sigmoid_backward(grad_out, output_); }

 private:
  BasicTensor<T> output_;
};

template <typename T>
class Upsample2x final : public Differentiable<T> {
 public:
  std::string name() const override { return "upsample_bilinear_2x"; }
  BasicTensor<T> forward(const BasicTensor<T>& input) override { return upsample_bilinear_2x(input); }
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override { return upsample_bilinear_2x_backward(grad_out); }
};

template <typename T>
class GlobalAvgPool final : public Differentiable<T> {
 public:
  std::string name() const override { return "global_avg_pool"; }
  BasicTensor<T> forward(const BasicTensor<T>& input) override {
    input_shape_ = input.shape();
    return global_avg_pool(input);
  }
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override {
    return global_avg_pool_backward(grad_out, input_shape_);
  }

 private:
  Shape input_shape_;
};

/// conv -> batch norm -> relu, the unit every encoder/decoder/pyramid block is built from.
/// The convolution has no bias (batch norm's shift subsumes it).
template <typename T>
class ConvBnRelu final : public Differentiable<T> {
 public:
  ConvBnRelu(const std::string& name, std::size_t in_channels, std::size_t out_channels, ConvParams params);

  std::string name() const override { return name_; }
  BasicTensor<T> forward(const BasicTensor<T>& input) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  std::vector<ParamView<T>> parameters() override;
  std::vector<ParamView<T>> buffers() override { return bn_.buffers(); }

  void init(Rng& rng) { conv_.init(rng); }
  void set_mode(Mode mode) { bn_.set_mode(mode); }
  /// Training caches intermediate activations for backward(); inference does not.
  void set_caching(bool enabled);

  Conv2d<T>& conv() { return conv_; }
  const Conv2d<T>& conv() const { return conv_; }
  BatchNorm2d<T>& bn() { return bn_; }

 private:
  std::string name_;
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  BasicTensor<T> pre_activation_;
  bool caching_ = true;
};

}  // namespace scinet
