#include <algorithm>
#include <cstring>
#include <string>

#include "gemm.hpp"
#include "scinet/ops.hpp"
#include "scinet/parallel.hpp"

namespace scinet {

namespace {

// Upper bound on the im2col scratch buffer per chunk, in elements.
constexpr std::size_t kColumnBudget = std::size_t{1} << 19;

std::string dims(std::size_t a, std::size_t b) { return std::to_string(a) + "x" + std::to_string(b); }

struct ConvGeometry {
  std::size_t in_c, in_h, in_w;
  std::size_t out_c, out_h, out_w;
  std::size_t patch;  // in_c * kernel_h * kernel_w
  bool pointwise;     // 1x1, stride 1, no padding: the input plane is already the column matrix

  std::size_t out_plane() const { return out_h * out_w; }

  // Output rows per im2col chunk.
  std::size_t rows_per_chunk() const {
    const std::size_t per_row = patch * out_w;
    return std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_row, 1), 1, out_h);
  }
};

template <typename T>
ConvGeometry check_conv(const Shape& in, const BasicTensor<T>& weights, const ConvParams& p) {
  const Shape& ws = weights.shape();
  if (ws.h != p.kernel_h || ws.w != p.kernel_w) {
    throw ShapeError("conv2d: weight kernel " + dims(ws.h, ws.w) + " does not match params kernel " +
                     dims(p.kernel_h, p.kernel_w));
  }
  if (ws.c != in.c) {
    throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels but weights expect " +
                     std::to_string(ws.c) + " (weights " + ws.str() + ", input " + in.str() + ")");
  }
  const Shape out = p.output_shape(in, ws.n);
  ConvGeometry g{in.c, in.h, in.w, ws.n, out.h, out.w, in.c * p.kernel_h * p.kernel_w, false};
  g.pointwise = p.kernel_h == 1 && p.kernel_w == 1 && p.stride_h == 1 && p.stride_w == 1 && p.pad_h == 0 &&
                p.pad_w == 0;
  return g;
}

// Gathers patches for output rows [row0, row1) into col[patch x ((row1-row0) * out_w)].
template <typename T>
void im2col(const T* input, const ConvGeometry& g, const ConvParams& p, std::size_t row0, std::size_t row1,
            T* col) {
  const std::size_t cols = (row1 - row0) * g.out_w;
  const auto in_h = static_cast<std::ptrdiff_t>(g.in_h);
  const auto in_w = static_cast<std::ptrdiff_t>(g.in_w);
  std::size_t k = 0;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    const T* plane = input + c * g.in_h * g.in_w;
    for (std::size_t u = 0; u < p.kernel_h; ++u) {
      for (std::size_t v = 0; v < p.kernel_w; ++v, ++k) {
        T* dst = col + k * cols;
        const auto dy = static_cast<std::ptrdiff_t>(u * p.dilation) - static_cast<std::ptrdiff_t>(p.pad_h);
        const auto dx = static_cast<std::ptrdiff_t>(v * p.dilation) - static_cast<std::ptrdiff_t>(p.pad_w);
        for (std::size_t i = row0; i < row1; ++i) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(i * p.stride_h) + dy;
          T* out_row = dst + (i - row0) * g.out_w;
          if (ih < 0 || ih >= in_h) {
            std::fill(out_row, out_row + g.out_w, T(0));
            continue;
          }
          const T* src = plane + ih * in_w;
          for (std::size_t j = 0; j < g.out_w; ++j) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(j * p.stride_w) + dx;
            out_row[j] = (iw >= 0 && iw < in_w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-adds col[patch x cols] back onto the input gradient (adjoint of im2col).
template <typename T>
void col2im(const T* col, const ConvGeometry& g, const ConvParams& p, std::size_t row0, std::size_t row1,
            T* grad_input) {
  const std::size_t cols = (row1 - row0) * g.out_w;
  const auto in_h = static_cast<std::ptrdiff_t>(g.in_h);
  const auto in_w = static_cast<std::ptrdiff_t>(g.in_w);
  std::size_t k = 0;
  for (std::size_t c = 0; c < g.in_c; ++c) {
    T* plane = grad_input + c * g.in_h * g.in_w;
    for (std::size_t u = 0; u < p.kernel_h; ++u) {
      for (std::size_t v = 0; v < p.kernel_w; ++v, ++k) {
        const T* src = col + k * cols;
        const auto dy = static_cast<std::ptrdiff_t>(u * p.dilation) - static_cast<std::ptrdiff_t>(p.pad_h);
        const auto dx = static_cast<std::ptrdiff_t>(v * p.dilation) - static_cast<std::ptrdiff_t>(p.pad_w);
        for (std::size_t i = row0; i < row1; ++i) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(i * p.stride_h) + dy;
          if (ih < 0 || ih >= in_h) continue;
          T* dst = plane + ih * in_w;
          const T* in_row = src + (i - row0) * g.out_w;
          for (std::size_t j = 0; j < g.out_w; ++j) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(j * p.stride_w) + dx;
            if (iw >= 0 && iw < in_w) dst[iw] += in_row[j];
          }
        }
      }
    }
  }
}

}  // namespace

ConvParams ConvParams::same(std::size_t kernel, std::size_t stride, std::size_t dilation) {
  const std::size_t pad = dilation * (kernel - 1) / 2;
  return ConvParams{kernel, kernel, stride, stride, pad, pad, dilation};
}

Shape ConvParams::output_shape(const Shape& input, std::size_t out_channels) const {
  if (kernel_h == 0 || kernel_w == 0 || stride_h == 0 || stride_w == 0 || dilation == 0) {
    throw ShapeError("conv2d: kernel, stride and dilation must be >= 1");
  }
  const std::size_t span_h = dilation * (kernel_h - 1) + 1;
  const std::size_t span_w = dilation * (kernel_w - 1) + 1;
  if (input.h + 2 * pad_h < span_h || input.w + 2 * pad_w < span_w) {
    throw ShapeError("conv2d: input " + dims(input.h, input.w) + " with padding " + dims(pad_h, pad_w) +
                     " is smaller than the dilated kernel extent " + dims(span_h, span_w));
  }
  return Shape{input.n, out_channels, (input.h + 2 * pad_h - span_h) / stride_h + 1,
               (input.w + 2 * pad_w - span_w) / stride_w + 1};
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights, std::span<const T> bias,
                              const ConvParams& params) {
  const ConvGeometry g = check_conv(input.shape(), weights, params);
  if (!bias.empty() && bias.size() != g.out_c) {
    throw ShapeError("conv2d: bias has " + std::to_string(bias.size()) + " entries for " +
                     std::to_string(g.out_c) + " output channels");
  }
  const std::size_t batch = input.shape().n;
  BasicTensor<T> out(Shape{batch, g.out_c, g.out_h, g.out_w});
  const std::size_t plane_out = g.out_plane();

  parallel_for(batch, [&](std::size_t n) {
    T* y = out.plane(n, 0);
    for (std::size_t o = 0; o < g.out_c; ++o) {
      std::fill(y + o * plane_out, y + (o + 1) * plane_out, bias.empty() ? T(0) : bias[o]);
    }
    const T* x = input.plane(n, 0);
    if (g.pointwise) {
      detail::gemm_accumulate(g.out_c, plane_out, g.patch, weights.ptr(), g.patch, x, plane_out, y, plane_out);
      return;
    }
    const std::size_t chunk_rows = g.rows_per_chunk();
    std::vector<T> col(g.patch * chunk_rows * g.out_w);
    for (std::size_t r0 = 0; r0 < g.out_h; r0 += chunk_rows) {
      const std::size_t r1 = std::min(g.out_h, r0 + chunk_rows);
      const std::size_t cols = (r1 - r0) * g.out_w;
      im2col(x, g, params, r0, r1, col.data());
      detail::gemm_accumulate(g.out_c, cols, g.patch, weights.ptr(), g.patch, col.data(), cols, y + r0 * g.out_w,
                              plane_out);
    }
  });
  check_finite(out, "conv2d_forward");
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& saved_input,
                             const BasicTensor<T>& weights, const ConvParams& params) {
  const ConvGeometry g = check_conv(saved_input.shape(), weights, params);
  const Shape expected{saved_input.shape().n, g.out_c, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw ShapeError("conv2d_backward: grad_out shape " + grad_out.shape().str() +
                     " does not match forward output shape " + expected.str());
  }
  const std::size_t batch = expected.n;
  const std::size_t plane_out = g.out_plane();
  const std::size_t weight_size = weights.numel();

  // W^T [patch x out_c] for the input gradient.
  std::vector<T> weights_t(weight_size);
  detail::transpose(g.out_c, g.patch, weights.ptr(), g.patch, weights_t.data());

  ConvGrads<T> grads{BasicTensor<T>(saved_input.shape()), BasicTensor<T>(weights.shape()),
                     std::vector<T>(g.out_c, T(0))};
  // Per-sample weight/bias partials, reduced in sample order afterwards so the
  // result is independent of the thread count.
  std::vector<T> weight_partial(batch * weight_size, T(0));
  std::vector<T> bias_partial(batch * g.out_c, T(0));

  parallel_for(batch, [&](std::size_t n) {
    const T* dy = grad_out.plane(n, 0);
    const T* x = saved_input.plane(n, 0);
    T* dx = grads.input.plane(n, 0);
    T* dw = weight_partial.data() + n * weight_size;
    T* db = bias_partial.data() + n * g.out_c;
    for (std::size_t o = 0; o < g.out_c; ++o) {
      T acc = 0;
      for (std::size_t i = 0; i < plane_out; ++i) acc += dy[o * plane_out + i];
      db[o] = acc;
    }
    if (g.pointwise) {
      std::vector<T> x_t(plane_out * g.patch);
      detail::transpose(g.patch, plane_out, x, plane_out, x_t.data());
      detail::gemm_accumulate(g.out_c, g.patch, plane_out, dy, plane_out, x_t.data(), g.patch, dw, g.patch);
      detail::gemm_accumulate(g.patch, plane_out, g.out_c, weights_t.data(), g.out_c, dy, plane_out, dx,
                              plane_out);
      return;
    }
    const std::size_t chunk_rows = g.rows_per_chunk();
    const std::size_t max_cols = chunk_rows * g.out_w;
    std::vector<T> col(g.patch * max_cols);
    std::vector<T> col_t(g.patch * max_cols);
    std::vector<T> dcol(g.patch * max_cols);
    for (std::size_t r0 = 0; r0 < g.out_h; r0 += chunk_rows) {
      const std::size_t r1 = std::min(g.out_h, r0 + chunk_rows);
      const std::size_t cols = (r1 - r0) * g.out_w;
      const T* dy_chunk = dy + r0 * g.out_w;
      im2col(x, g, params, r0, r1, col.data());
      detail::transpose(g.patch, cols, col.data(), cols, col_t.data());
      detail::gemm_accumulate(g.out_c, g.patch, cols, dy_chunk, plane_out, col_t.data(), g.patch, dw, g.patch);
      std::fill(dcol.begin(), dcol.begin() + static_cast<std::ptrdiff_t>(g.patch * cols), T(0));
      detail::gemm_accumulate(g.patch, cols, g.out_c, weights_t.data(), g.out_c, dy_chunk, plane_out, dcol.data(),
                              cols);
      col2im(dcol.data(), g, params, r0, r1, dx);
    }
  });

  for (std::size_t n = 0; n < batch; ++n) {
    const T* dw = weight_partial.data() + n * weight_size;
    for (std::size_t i = 0; i < weight_size; ++i) grads.weights[i] += dw[i];
    const T* db = bias_partial.data() + n * g.out_c;
    for (std::size_t o = 0; o < g.out_c; ++o) grads.bias[o] += db[o];
  }
  check_finite(grads.input, "conv2d_backward");
  return grads;
}

template BasicTensor<float> conv2d_forward(const BasicTensor<float>&, const BasicTensor<float>&,
                                           std::span<const float>, const ConvParams&);
template BasicTensor<double> conv2d_forward(const BasicTensor<double>&, const BasicTensor<double>&,
                                            std::span<const double>, const ConvParams&);
template ConvGrads<float> conv2d_backward(const BasicTensor<float>&, const BasicTensor<float>&,
                                          const BasicTensor<float>&, const ConvParams&);
template ConvGrads<double> conv2d_backward(const BasicTensor<double>&, const BasicTensor<double>&,
                                           const BasicTensor<double>&, const ConvParams&);

}  // namespace scinet
