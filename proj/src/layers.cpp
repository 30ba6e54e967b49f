#include "scinet/layers.hpp"

#include <cmath>

namespace scinet {

// ---------------------------------------------------------------------------
// Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::string name, std::size_t in_channels, std::size_t out_channels, ConvParams params,
                  bool with_bias)
    : name_(std::move(name)),
      params_(params),
      weight_(Shape{out_channels, in_channels, params.kernel_h, params.kernel_w}),
      weight_grad_(weight_.shape()),
      bias_(with_bias ? out_channels : 0, T(0)),
      bias_grad_(bias_.size(), T(0)) {}

template <typename T>
void Conv2d<T>::init(Rng& rng) {
  const double fan_in = static_cast<double>(in_channels() * params_.kernel_h * params_.kernel_w);
  weight_ = BasicTensor<T>::randn(weight_.shape(), rng, std::sqrt(2.0 / fan_in));
  std::fill(bias_.begin(), bias_.end(), T(0));
}

template <typename T>
BasicTensor<T> Conv2d<T>::forward(const BasicTensor<T>& input) {
  if (caching_) saved_input_ = input;
  return conv2d_forward(input, weight_, std::span<const T>(bias_), params_);
}

template <typename T>
BasicTensor<T> Conv2d<T>::backward(const BasicTensor<T>& grad_out) {
  if (saved_input_.empty()) throw ShapeError(name_ + ": backward() without a cached forward()");
  auto g = conv2d_backward(grad_out, saved_input_, weight_, params_);
  weight_grad_ += g.weights;
  for (std::size_t i = 0; i < bias_grad_.size(); ++i) bias_grad_[i] += g.bias[i];
  return std::move(g.input);
}

template <typename T>
std::vector<ParamView<T>> Conv2d<T>::parameters() {
  std::vector<ParamView<T>> out{{name_ + ".weight", weight_.shape(), weight_.data(), weight_grad_.data()}};
  if (!bias_.empty()) out.push_back({name_ + ".bias", Shape{bias_.size(), 1, 1, 1}, bias_, bias_grad_});
  return out;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::string name, std::size_t channels)
    : name_(std::move(name)), state_(channels), scale_grad_(channels, T(0)), shift_grad_(channels, T(0)) {}

template <typename T>
BasicTensor<T> BatchNorm2d<T>::forward(const BasicTensor<T>& input) {
  return batchnorm_forward(input, state_, mode_, caching_ ? &cache_ : nullptr);
}

template <typename T>
BasicTensor<T> BatchNorm2d<T>::backward(const BasicTensor<T>& grad_out) {
  auto g = batchnorm_backward(grad_out, cache_, state_);
  for (std::size_t c = 0; c < state_.channels(); ++c) {
    scale_grad_[c] += g.scale[c];
    shift_grad_[c] += g.shift[c];
  }
  return std::move(g.input);
}

template <typename T>
std::vector<ParamView<T>> BatchNorm2d<T>::parameters() {
  const Shape s{state_.channels(), 1, 1, 1};
  return {{name_ + ".scale", s, state_.scale, scale_grad_}, {name_ + ".shift", s, state_.shift, shift_grad_}};
}

template <typename T>
std::vector<ParamView<T>> BatchNorm2d<T>::buffers() {
  const Shape s{state_.channels(), 1, 1, 1};
  return {{name_ + ".running_mean", s, state_.running_mean, {}}, {name_ + ".running_var", s, state_.running_var, {}}};
}

// ---------------------------------------------------------------------------
// ConvBnRelu

template <typename T>
ConvBnRelu<T>::ConvBnRelu(const std::string& name, std::size_t in_channels, std::size_t out_channels,
                          ConvParams params)
    : name_(name),
      conv_(name + ".conv", in_channels, out_channels, params, false), bn_(name + ".bn", out_channels) {}

template <typename T>
void ConvBnRelu<T>::set_caching(bool enabled) {
  caching_ = enabled;
  conv_.set_caching(enabled);
  bn_.set_caching(enabled);
  if (!enabled) {
    conv_.release();
    pre_activation_ = {};
  }
}

template <typename T>
BasicTensor<T> ConvBnRelu<T>::forward(const BasicTensor<T>& input) {
  auto z = bn_.forward(conv_.forward(input));
  auto y = relu(z);
  if (caching_) pre_activation_ = std::move(z);
  return y;
}

template <typename T>
BasicTensor<T> ConvBnRelu<T>::backward(const BasicTensor<T>& grad_out) {
  return conv_.backward(bn_.backward(relu_backward(grad_out, pre_activation_)));
}

template <typename T>
std::vector<ParamView<T>> ConvBnRelu<T>::parameters() {
  auto out = conv_.parameters();
  for (auto& p : bn_.parameters()) out.push_back(p);
  return out;
}

template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class ConvBnRelu<float>;
template class ConvBnRelu<double>;

}  // namespace scinet
