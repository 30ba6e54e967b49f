#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "scinet/tensor.hpp"

namespace scinet {

/// Geometry of a 2-D convolution. Dilation is isotropic.
struct ConvParams {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
  std::size_t dilation = 1;

  /// Square kernel with "same" padding for stride 1: pad = dilation * (k - 1) / 2.
  static ConvParams same(std::size_t kernel, std::size_t stride = 1, std::size_t dilation = 1);

  /// Throws ShapeError unless every extent is positive and the output is non-empty.
  Shape output_shape(const Shape& input, std::size_t out_channels) const;
};

// Convolution. Cross-correlation convention (no kernel flip):
//   y[n, o, i, j] = b[o] + sum_{c, u, v} x[n, c, i*s + u*r - p, j*s + v*r - p] * w[o, c, u, v]
// with zero padding outside the input.

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                              std::span<const T> bias, const ConvParams& params);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  std::vector<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& saved_input,
                             const BasicTensor<T>& weights, const ConvParams& params);

/// Per-channel batch normalization parameters and running statistics.
template <typename T>
struct BatchNormState {
  std::vector<T> scale;
  std::vector<T> shift;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : scale(channels, T(1)), shift(channels, T(0)), running_mean(channels, T(0)), running_var(channels, T(1)) {}
  std::size_t channels() const { return scale.size(); }
};

enum class Mode { Train, Eval };

/// Quantities the backward pass needs from the forward pass.
template <typename T>
struct BatchNormCache {
  Mode mode = Mode::Train;
  BasicTensor<T> normalized;  // x_hat
  std::vector<T> inv_std;
};

/// Train mode normalizes with biased batch statistics and updates the running
/// estimates (unbiased variance); eval mode uses the running estimates.
template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, BatchNormState<T>& state, Mode mode,
                                 BatchNormCache<T>* cache = nullptr);

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  std::vector<T> scale;
  std::vector<T> shift;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out, const BatchNormCache<T>& cache,
                                     const BatchNormState<T>& state);

/// 2x bilinear upsampling with the half-pixel convention (align_corners =
/// false): output sample o maps to source coordinate (o + 0.5) / 2 - 0.5,
/// clamped to the valid range.
template <typename T>
BasicTensor<T> upsample_bilinear_2x(const BasicTensor<T>& input);

/// Adjoint of upsample_bilinear_2x; `grad_out` has shape (n, c, 2h, 2w).
template <typename T>
BasicTensor<T> upsample_bilinear_2x_backward(const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input);
/// Takes the forward *output*.
template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& output);

/// Concatenates along the channel axis; n, h, w must agree.
template <typename T>
BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>& parts);

/// Inverse of concat_channels for gradients: slices `grad` into blocks of the
/// given channel counts.
template <typename T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& grad, const std::vector<std::size_t>& channels);

/// Per-(n, c) spatial mean, returned as (n, c, 1, 1).
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input);
template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_shape);

/// Replicates a (n, c, 1, 1) tensor over an h x w grid.
template <typename T>
BasicTensor<T> broadcast_spatial(const BasicTensor<T>& input, std::size_t h, std::size_t w);
template <typename T>
BasicTensor<T> broadcast_spatial_backward(const BasicTensor<T>& grad_out);

}  // namespace scinet
