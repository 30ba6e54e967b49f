#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

namespace scinet::rf {

enum class LayerKind { Conv, Pool, Upsample, Identity };

/// Static geometry of one layer. For Upsample, `stride` is the upsampling factor.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  int kernel = 1;
  int stride = 1;
  int dilation = 1;
};

/// Cumulative receptive-field state after a layer, in input pixels.
struct RFState {
  std::string name;
  int effective_kernel = 1;
  std::int64_t receptive_field = 1;
  std::int64_t jump = 1;  // input pixels between adjacent features
  std::int64_t output_stride = 1;
};

/// k + (k - 1)(r - 1): extent of a k-tap kernel with r - 1 holes between taps.
int effective_kernel(int kernel, int rate);

/// Receptive field of two stacked stride-1 layers: r1 + r2 - 1.
std::int64_t stack_rf(std::int64_t r1, std::int64_t r2);

/// Standard recurrences, applied layer by layer starting from R = 1, j = 1:
///   R <- R + (k_eff - 1) * j,  j <- j * s          (conv, pool)
///   j <- j / factor                                  (upsample; must divide)
/// The output stride equals the jump.
/// Throws ConfigError for an empty chain or an invalid layer (naming its index).
std::vector<RFState> analyze_chain(const std::vector<LayerSpec>& layers);

enum class Topology { Parallel, Dense };

struct PyramidScales {
  Topology topology = Topology::Dense;
  std::vector<int> rates;
  std::vector<int> effective_kernels;
  /// One entry per combination: per branch (parallel) or per subset of the
  /// cascade, indexed by bitmask with bit i = block i (dense; includes the
  /// empty pass-through subset, RF 1).
  std::vector<std::int64_t> combinations;
  std::set<std::int64_t> distinct;
  std::int64_t max_rf = 1;
};

PyramidScales enumerate_pyramid_scales(Topology topology, const std::vector<int>& rates, int kernel);

std::string to_string(LayerKind kind);
std::string to_string(Topology topology);

/// One line per layer: name, k_eff, R, jump, output stride.
std::string format_chain(const std::vector<RFState>& states);
std::string format_pyramid(const PyramidScales& scales);

nlohmann::json chain_to_json(const std::vector<RFState>& states);
nlohmann::json pyramid_to_json(const PyramidScales& scales);

}  // namespace scinet::rf
