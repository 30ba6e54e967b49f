#include <algorithm>
#include <cmath>
#include <string>

#include "scinet/ops.hpp"

namespace scinet {

namespace {

// Two-tap source indices and weights for one axis of the half-pixel 2x upsample.
template <typename T>
struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<T> w_lo, w_hi;
};

template <typename T>
Taps<T> upsample_taps(std::size_t in) {
  const std::size_t out = 2 * in;
  Taps<T> t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_lo.resize(out);
  t.w_hi.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    src = std::max(src, 0.0);
    const auto lo = static_cast<std::size_t>(src);
    const std::size_t hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    t.lo[o] = lo;
    t.hi[o] = hi;
    t.w_lo[o] = static_cast<T>(1.0 - frac);
    t.w_hi[o] = static_cast<T>(frac);
  }
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, BatchNormState<T>& state, Mode mode,
                                 BatchNormCache<T>* cache) {
  const Shape& s = input.shape();
  if (s.c != state.channels()) {
    throw ShapeError("batchnorm: input has " + std::to_string(s.c) + " channels, state has " +
                     std::to_string(state.channels()));
  }
  const std::size_t count = s.n * s.plane();
  if (mode == Mode::Train && count == 0) throw ShapeError("batchnorm: zero-size batch in train mode");

  BasicTensor<T> out(s);
  BasicTensor<T> normalized(cache ? s : Shape{});
  std::vector<T> inv_std(s.c);

  for (std::size_t c = 0; c < s.c; ++c) {
    double mean = 0;
    double var = 0;
    if (mode == Mode::Train) {
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* x = input.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) mean += x[i];
      }
      mean /= static_cast<double>(count);
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* x = input.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const double d = x[i] - mean;
          var += d * d;
        }
      }
      const double unbiased = count > 1 ? var / static_cast<double>(count - 1) : 0.0;
      var /= static_cast<double>(count);
      state.running_mean[c] = static_cast<T>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean);
      state.running_var[c] = static_cast<T>((1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const T istd = static_cast<T>(1.0 / std::sqrt(var + state.epsilon));
    const T m = static_cast<T>(mean);
    inv_std[c] = istd;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* x = input.plane(n, c);
      T* y = out.plane(n, c);
      T* xh = cache ? normalized.plane(n, c) : nullptr;
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const T v = (x[i] - m) * istd;
        if (xh) xh[i] = v;
        y[i] = state.scale[c] * v + state.shift[c];
      }
    }
  }
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  check_finite(out, "batchnorm_forward");
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out, const BatchNormCache<T>& cache,
                                     const BatchNormState<T>& state) {
  const Shape& s = grad_out.shape();
  if (s != cache.normalized.shape()) {
    throw ShapeError("batchnorm_backward: grad_out " + s.str() + " vs cached " + cache.normalized.shape().str());
  }
  BatchNormGrads<T> g{BasicTensor<T>(s), std::vector<T>(s.c), std::vector<T>(s.c)};
  const double count = static_cast<double>(s.n * s.plane());
  for (std::size_t c = 0; c < s.c; ++c) {
    double dscale = 0;
    double dshift = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* dy = grad_out.plane(n, c);
      const T* xh = cache.normalized.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        dshift += dy[i];
        dscale += static_cast<double>(dy[i]) * xh[i];
      }
    }
    g.scale[c] = static_cast<T>(dscale);
    g.shift[c] = static_cast<T>(dshift);
    const T k = state.scale[c] * cache.inv_std[c];
    if (cache.mode == Mode::Train) {
      const T mean_dy = static_cast<T>(dshift / count);
      const T mean_dy_xh = static_cast<T>(dscale / count);
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* dy = grad_out.plane(n, c);
        const T* xh = cache.normalized.plane(n, c);
        T* dx = g.input.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) dx[i] = k * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
      }
    } else {
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* dy = grad_out.plane(n, c);
        T* dx = g.input.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) dx[i] = k * dy[i];
      }
    }
  }
  check_finite(g.input, "batchnorm_backward");
  return g;
}

// ---------------------------------------------------------------------------
// Bilinear 2x upsampling

template <typename T>
BasicTensor<T> upsample_bilinear_2x(const BasicTensor<T>& input) {
  const Shape& s = input.shape();
  if (s.h == 0 || s.w == 0) throw ShapeError("upsample_bilinear_2x: empty spatial dims " + s.str());
  const auto ty = upsample_taps<T>(s.h);
  const auto tx = upsample_taps<T>(s.w);
  const std::size_t oh = 2 * s.h;
  const std::size_t ow = 2 * s.w;
  BasicTensor<T> out(Shape{s.n, s.c, oh, ow});
  std::vector<T> row(ow);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* x = input.plane(n, c);
      T* y = out.plane(n, c);
      for (std::size_t i = 0; i < oh; ++i) {
        const T* r0 = x + ty.lo[i] * s.w;
        const T* r1 = x + ty.hi[i] * s.w;
        const T a = ty.w_lo[i];
        const T b = ty.w_hi[i];
        for (std::size_t j = 0; j < s.w; ++j) row[j] = a * r0[j] + b * r1[j];
        T* dst = y + i * ow;
        for (std::size_t j = 0; j < ow; ++j) dst[j] = tx.w_lo[j] * row[tx.lo[j]] + tx.w_hi[j] * row[tx.hi[j]];
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> upsample_bilinear_2x_backward(const BasicTensor<T>& grad_out) {
  const Shape& s = grad_out.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0) {
    throw ShapeError("upsample_bilinear_2x_backward: grad_out spatial dims must be even, got " + s.str());
  }
  const std::size_t ih = s.h / 2;
  const std::size_t iw = s.w / 2;
  const auto ty = upsample_taps<T>(ih);
  const auto tx = upsample_taps<T>(iw);
  BasicTensor<T> grad(Shape{s.n, s.c, ih, iw});
  std::vector<T> row(iw);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* dy = grad_out.plane(n, c);
      T* dx = grad.plane(n, c);
      for (std::size_t i = 0; i < s.h; ++i) {
        std::fill(row.begin(), row.end(), T(0));
        const T* src = dy + i * s.w;
        for (std::size_t j = 0; j < s.w; ++j) {
          row[tx.lo[j]] += tx.w_lo[j] * src[j];
          row[tx.hi[j]] += tx.w_hi[j] * src[j];
        }
        T* d0 = dx + ty.lo[i] * iw;
        T* d1 = dx + ty.hi[i] * iw;
        for (std::size_t j = 0; j < iw; ++j) {
          d0[j] += ty.w_lo[i] * row[j];
          d1[j] += ty.w_hi[i] * row[j];
        }
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Point-wise activations

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  // NaN passes through so that divergence is not hidden
  for (std::size_t i = 0; i < input.numel(); ++i) out[i] = input[i] < T(0) ? T(0) : input[i];
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input) {
  grad_out.require_same_shape(input, "relu_backward");
  BasicTensor<T> grad(input.shape());
  for (std::size_t i = 0; i < input.numel(); ++i) grad[i] = input[i] > T(0) ? grad_out[i] : T(0);
  return grad;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.numel(); ++i) {
    const T x = input[i];
    // Branches keep exp() from overflowing for large |x|.
    if (x >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-x));
    } else {
      const T e = std::exp(x);
      out[i] = e / (T(1) + e);
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& output) {
  grad_out.require_same_shape(output, "sigmoid_backward");
  BasicTensor<T> grad(output.shape());
  for (std::size_t i = 0; i < output.numel(); ++i) grad[i] = grad_out[i] * output[i] * (T(1) - output[i]);
  return grad;
}

// ---------------------------------------------------------------------------
// Channel concat / split

template <typename T>
BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts.front()->shape();
  std::size_t channels = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Shape& s = parts[k]->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels: input " + std::to_string(k) + " has shape " + s.str() +
                       ", incompatible with input 0 shape " + first.str() + " (n, h, w must agree)");
    }
    channels += s.c;
  }
  BasicTensor<T> out(Shape{first.n, channels, first.h, first.w});
  const std::size_t plane = first.plane();
  for (std::size_t n = 0; n < first.n; ++n) {
    T* dst = out.plane(n, 0);
    for (const auto* part : parts) {
      const std::size_t len = part->shape().c * plane;
      std::copy_n(part->plane(n, 0), len, dst);
      dst += len;
    }
  }
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& grad, const std::vector<std::size_t>& channels) {
  const Shape& s = grad.shape();
  std::size_t total = 0;
  for (auto c : channels) total += c;
  if (total != s.c) {
    throw ShapeError("split_channels: parts sum to " + std::to_string(total) + " channels, tensor has " +
                     std::to_string(s.c));
  }
  std::vector<BasicTensor<T>> out;
  out.reserve(channels.size());
  for (auto c : channels) out.emplace_back(Shape{s.n, c, s.h, s.w});
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* src = grad.plane(n, 0);
    for (auto& part : out) {
      const std::size_t len = part.shape().c * plane;
      std::copy_n(src, len, part.plane(n, 0));
      src += len;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Global pooling / broadcast

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  const Shape& s = input.shape();
  if (s.plane() == 0) throw ShapeError("global_avg_pool: empty spatial dims " + s.str());
  BasicTensor<T> out(Shape{s.n, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* x = input.plane(n, c);
      double acc = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += x[i];
      out.at(n, c, 0, 0) = static_cast<T>(acc / static_cast<double>(s.plane()));
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_shape) {
  const Shape expected{input_shape.n, input_shape.c, 1, 1};
  if (grad_out.shape() != expected) {
    throw ShapeError("global_avg_pool_backward: grad_out " + grad_out.shape().str() + ", expected " +
                     expected.str());
  }
  auto grad = broadcast_spatial(grad_out, input_shape.h, input_shape.w);
  grad *= static_cast<T>(1.0 / static_cast<double>(input_shape.plane()));
  return grad;
}

template <typename T>
BasicTensor<T> broadcast_spatial(const BasicTensor<T>& input, std::size_t h, std::size_t w) {
  const Shape& s = input.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("broadcast_spatial: expected (n, c, 1, 1), got " + s.str());
  BasicTensor<T> out(Shape{s.n, s.c, h, w});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T* y = out.plane(n, c);
      std::fill(y, y + h * w, input.at(n, c, 0, 0));
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> broadcast_spatial_backward(const BasicTensor<T>& grad_out) {
  const Shape& s = grad_out.shape();
  BasicTensor<T> grad(Shape{s.n, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* g = grad_out.plane(n, c);
      double acc = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += g[i];
      grad.at(n, c, 0, 0) = static_cast<T>(acc);
    }
  }
  return grad;
}

#define SCINET_INSTANTIATE_OPS(T)                                                                              \
  template BasicTensor<T> batchnorm_forward(const BasicTensor<T>&, BatchNormState<T>&, Mode, BatchNormCache<T>*); \
  template BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>&, const BatchNormCache<T>&,                 \
                                                const BatchNormState<T>&);                                       \
  template BasicTensor<T> upsample_bilinear_2x(const BasicTensor<T>&);                                         \
  template BasicTensor<T> upsample_bilinear_2x_backward(const BasicTensor<T>&);                                \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> sigmoid_backward(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> concat_channels(const std::vector<const BasicTensor<T>*>&);                          \
  template std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>&, const std::vector<std::size_t>&); \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                              \
  template BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>&, const Shape&);                       \
  template BasicTensor<T> broadcast_spatial(const BasicTensor<T>&, std::size_t, std::size_t);                  \
  template BasicTensor<T> broadcast_spatial_backward(const BasicTensor<T>&);

SCINET_INSTANTIATE_OPS(float)
SCINET_INSTANTIATE_OPS(double)

#undef SCINET_INSTANTIATE_OPS

}  // namespace scinet
