#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scinet/errors.hpp"
#include "scinet/rng.hpp"

namespace scinet {

/// NCHW extents of a rank-4 tensor.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// When enabled, ops validate their outputs for NaN/Inf and throw
/// NumericalError naming the op. Off by default.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

/// Dense NCHW array of reals stored row-major. Value semantics.
///
/// `Tensor` (float) is the compute type; `TensorD` (double) exists so that
/// gradients can be verified by finite differences at high precision.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
  BasicTensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(shape); }

  static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    BasicTensor t(shape);
    for (auto& v : t.data_) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  static BasicTensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    BasicTensor t(shape);
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[offset(n, c, h, w)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }

  /// Pointer to the (n, c) spatial plane.
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  BasicTensor& operator+=(const BasicTensor& other) {
    require_same_shape(other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  BasicTensor& operator*=(T scale) {
    for (auto& v : data_) v *= scale;
    return *this;
  }

  void require_same_shape(const BasicTensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw ShapeError(std::string(what) + ": shape " + shape_.str() + " vs " + other.shape_.str());
    }
  }

  bool all_finite() const {
    for (const auto& v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Element-wise conversion between precisions.
  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Throws NumericalError naming `where` and the first bad index if finite
/// checks are enabled and `t` holds NaN/Inf.
template <typename T>
void check_finite(const BasicTensor<T>& t, const char* where);

}  // namespace scinet
