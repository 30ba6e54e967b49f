#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scinet/layers.hpp"

namespace scinet {

struct GradCheckOptions {
  double tolerance = 1e-3;
  /// Central-difference step; 0 picks 1e-2 for float and 1e-6 for double.
  double step = 0.0;
  /// Fourth-order stencil instead of the two-point difference. Allows a larger
  /// step for smooth functions; near ReLU kinks a larger step hurts.
  bool five_point = false;
  /// Step multipliers tried again for an entry whose error exceeds the
  /// tolerance; the best agreement counts. A ReLU kink inside one step's
  /// window spoils only that step, a wrong gradient spoils all of them.
  std::vector<double> retry_steps;
  /// At most this many entries are probed per tensor (sampled when larger).
  std::size_t max_entries = 128;
  /// Each tensor's scale is floored at this fraction of the largest analytic
  /// gradient entry anywhere in the layer. A gradient that is structurally
  /// zero (e.g. a bias whose effect a following batch norm removes) has no
  /// scale of its own, and roundoff over roundoff would read as error 1.
  double scale_floor = 1e-3;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  /// Largest error over all checked tensors. Each tensor's error is
  /// max_i |analytic_i - numeric_i| / max_i max(|analytic_i|, |numeric_i|),
  /// i.e. the worst entry measured against that gradient's own scale.
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
  bool finite = true;
  bool passed = false;
  std::string message;
};

/// Compares the analytic gradients of `layer` (w.r.t. its input and every
/// parameter) with central differences of the scalar L = <layer(x), g> for a
/// fixed random projection g.
template <typename T>
GradCheckReport grad_check(Differentiable<T>& layer, const BasicTensor<T>& input, const GradCheckOptions& options);

/// Checks the float32 analytic gradients of `layer` against central
/// differences taken on `reference`, a float64 instance of the same module.
/// The reference's parameters and buffers are overwritten with the layer's
/// values first. Float32 differences through batch norm followed by ReLU
/// straddle kinks at any step large enough to beat float32 roundoff; this
/// keeps the analytic side in float32 while the numeric side stays sharp.
/// `options.step` applies to the reference (0 picks 1e-6).
GradCheckReport grad_check_with_reference(Differentiable<float>& layer, Differentiable<double>& reference,
                                          const Tensor& input, const GradCheckOptions& options);

}  // namespace scinet
