#include "scinet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "scinet/errors.hpp"

namespace scinet {

namespace {

template <typename T>
double project(const BasicTensor<T>& out, const BasicTensor<T>& weights) {
  double acc = 0;
  for (std::size_t i = 0; i < out.numel(); ++i) acc += static_cast<double>(out[i]) * weights[i];
  return acc;
}

std::vector<std::size_t> probe_indices(std::size_t size, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  if (size > limit) {
    shuffle(idx, rng);
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

struct TensorResult {
  double error = 0;
  std::size_t worst = 0;
  bool finite = true;
  std::size_t checked = 0;
};

// `values` is perturbed in place; `analytic` holds the gradient to compare against.
template <typename T, typename Eval>
TensorResult check_tensor(std::span<T> values, const std::vector<double>& analytic, Eval&& loss,
                          const GradCheckOptions& options, double step, double floor, std::size_t limit,
                          Rng& rng) {
  TensorResult r;
  std::vector<std::size_t> probed;
  std::vector<double> numeric;
  for (std::size_t i : probe_indices(values.size(), limit, rng)) {
    const T original = values[i];
    auto derivative = [&](double nominal) {
      auto at = [&](double offset) {
        values[i] = static_cast<T>(original + offset);
        return loss();
      };
      // Use the step that was actually representable.
      const double h = (static_cast<double>(static_cast<T>(original + nominal)) -
                        static_cast<double>(static_cast<T>(original - nominal))) / 2;
      const double d = options.five_point ? (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
                                          : (at(h) - at(-h)) / (2 * h);
      values[i] = original;
      return d;
    };
    probed.push_back(i);
    numeric.push_back(derivative(step));
    ++r.checked;
    if (!std::isfinite(numeric.back()) || !std::isfinite(static_cast<double>(analytic[i]))) {
      r.finite = false;
      r.worst = i;
      return r;
    }
  }

  double scale = floor;
  for (std::size_t k = 0; k < probed.size(); ++k)
    scale = std::max({scale, std::abs(static_cast<double>(analytic[probed[k]])), std::abs(numeric[k])});
  if (scale == 0) return r;

  double worst_abs = 0;
  for (std::size_t k = 0; k < probed.size(); ++k) {
    const std::size_t i = probed[k];
    const double a = analytic[i];
    double diff = std::abs(a - numeric[k]);
    for (double m : options.retry_steps) {
      if (diff <= options.tolerance * scale) break;
      const T original = values[i];
      const double h = (static_cast<double>(static_cast<T>(original + step * m)) -
                        static_cast<double>(static_cast<T>(original - step * m))) / 2;
      values[i] = static_cast<T>(original + h);
      const double plus = loss();
      values[i] = static_cast<T>(original - h);
      const double minus = loss();
      values[i] = original;
      diff = std::min(diff, std::abs(a - (plus - minus) / (2 * h)));
    }
    if (diff > worst_abs) {
      worst_abs = diff;
      r.worst = i;
    }
  }
  r.error = worst_abs / scale;
  return r;
}

// Analytic gradients come from `layer`, central differences from `numeric`
// (the same object unless a higher-precision twin is supplied).
template <typename T, typename R>
GradCheckReport run_check(Differentiable<T>& layer, Differentiable<R>& numeric, const BasicTensor<T>& input,
                          const GradCheckOptions& options) {
  GradCheckReport report;
  Rng rng(options.seed);
  const double step = options.step > 0 ? options.step : (sizeof(R) == sizeof(float) ? 1e-2 : 1e-6);

  layer.zero_grad();
  const BasicTensor<T> y = layer.forward(input);
  if (!y.all_finite()) {
    report.finite = false;
    report.message = layer.name() + ": forward produced non-finite values";
    return report;
  }
  const BasicTensor<T> projection = BasicTensor<T>::randn(y.shape(), rng);
  const BasicTensor<T> grad_in = layer.backward(projection);

  auto widen = [](auto span) { return std::vector<double>(span.begin(), span.end()); };
  std::vector<std::vector<double>> analytic{widen(grad_in.data())};
  auto params = layer.parameters();
  for (auto& p : params) analytic.push_back(widen(p.grad));
  double largest = 0;
  for (const auto& a : analytic)
    for (double v : a) largest = std::max(largest, std::abs(v));
  const double floor = options.scale_floor * largest;

  auto numeric_params = numeric.parameters();
  if constexpr (!std::is_same_v<T, R>) {
    auto copy_into = [&](auto from, auto to) {
      if (from.size() != to.size()) throw ShapeError("grad_check: reference does not mirror " + layer.name());
      for (std::size_t k = 0; k < from.size(); ++k) {
        if (from[k].value.size() != to[k].value.size())
          throw ShapeError("grad_check: reference tensor " + to[k].name + " differs in size");
        std::copy(from[k].value.begin(), from[k].value.end(), to[k].value.begin());
      }
    };
    copy_into(params, numeric_params);
    copy_into(layer.buffers(), numeric.buffers());
  }
  BasicTensor<R> x = input.template cast<R>();
  const BasicTensor<R> weights = projection.template cast<R>();
  auto loss = [&] { return project(numeric.forward(x), weights); };

  auto record = [&](const std::string& what, const TensorResult& r) {
    report.entries_checked += r.checked;
    if (!r.finite) {
      report.finite = false;
      report.worst_tensor = what;
      report.worst_index = r.worst;
      return;
    }
    if (r.error >= report.max_rel_error) {
      report.max_rel_error = r.error;
      report.worst_tensor = what;
      report.worst_index = r.worst;
    }
  };

  record("input", check_tensor(x.data(), analytic[0], loss, options, step, floor, options.max_entries, rng));
  for (std::size_t k = 0; k < numeric_params.size() && report.finite; ++k) {
    record(numeric_params[k].name,
           check_tensor(numeric_params[k].value, analytic[k + 1], loss, options, step, floor, options.max_entries, rng));
  }

  if (!report.finite) {
    report.passed = false;
    report.message = layer.name() + ": non-finite gradient in " + report.worst_tensor + " at index " +
                     std::to_string(report.worst_index);
    return report;
  }
  report.passed = report.max_rel_error <= options.tolerance;
  report.message = layer.name() + ": max relative error " + std::to_string(report.max_rel_error) + " (" +
                   report.worst_tensor + "[" + std::to_string(report.worst_index) + "])";
  return report;
}

}  // namespace

template <typename T>
GradCheckReport grad_check(Differentiable<T>& layer, const BasicTensor<T>& input, const GradCheckOptions& options) {
  return run_check(layer, layer, input, options);
}

GradCheckReport grad_check_with_reference(Differentiable<float>& layer, Differentiable<double>& reference,
                                          const Tensor& input, const GradCheckOptions& options) {
  return run_check(layer, reference, input, options);
}

template GradCheckReport grad_check(Differentiable<float>&, const BasicTensor<float>&, const GradCheckOptions&);
template GradCheckReport grad_check(Differentiable<double>&, const BasicTensor<double>&, const GradCheckOptions&);

}  // namespace scinet
