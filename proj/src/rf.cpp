#include "scinet/rf.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "scinet/errors.hpp"

namespace scinet::rf {

int effective_kernel(int kernel, int rate) {
  if (kernel < 1 || rate < 1) throw ConfigError("effective_kernel: kernel and rate must be >= 1");
  return kernel + (kernel - 1) * (rate - 1);
}

std::int64_t stack_rf(std::int64_t r1, std::int64_t r2) {
  if (r1 < 1 || r2 < 1) throw ConfigError("stack_rf: receptive fields must be >= 1");
  return r1 + r2 - 1;
}

std::vector<RFState> analyze_chain(const std::vector<LayerSpec>& layers) {
  if (layers.empty()) throw ConfigError("analyze_chain: empty layer chain");
  std::vector<RFState> out;
  out.reserve(layers.size());
  std::int64_t rf = 1;
  std::int64_t jump = 1;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.kernel < 1 || l.stride < 1 || l.dilation < 1) {
      throw ConfigError("analyze_chain: layer " + std::to_string(i) + " ('" + l.name +
                        "') needs kernel, stride and dilation >= 1");
    }
    int k_eff = 1;
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Pool:
        k_eff = effective_kernel(l.kernel, l.dilation);
        rf += static_cast<std::int64_t>(k_eff - 1) * jump;
        jump *= l.stride;
        break;
      case LayerKind::Upsample:
        if (jump % l.stride != 0) {
          throw ConfigError("analyze_chain: layer " + std::to_string(i) + " ('" + l.name + "') upsamples by " +
                            std::to_string(l.stride) + " below output stride 1");
        }
        jump /= l.stride;
        break;
      case LayerKind::Identity:
        break;
    }
    out.push_back(RFState{l.name, k_eff, rf, jump, jump});
  }
  return out;
}

PyramidScales enumerate_pyramid_scales(Topology topology, const std::vector<int>& rates, int kernel) {
  if (rates.empty()) throw ConfigError("enumerate_pyramid_scales: no rates");
  if (topology == Topology::Dense && rates.size() > 20) {
    throw ConfigError("enumerate_pyramid_scales: too many cascade blocks to enumerate");
  }
  PyramidScales s;
  s.topology = topology;
  s.rates = rates;
  for (int r : rates) s.effective_kernels.push_back(effective_kernel(kernel, r));

  if (topology == Topology::Parallel) {
    for (int k : s.effective_kernels) s.combinations.push_back(k);
  } else {
    const std::size_t subsets = std::size_t{1} << rates.size();
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      std::int64_t rf = 1;
      for (std::size_t b = 0; b < rates.size(); ++b) {
        if (mask & (std::size_t{1} << b)) rf = stack_rf(rf, s.effective_kernels[b]);
      }
      s.combinations.push_back(rf);
    }
  }
  s.distinct.insert(s.combinations.begin(), s.combinations.end());
  s.max_rf = *std::max_element(s.combinations.begin(), s.combinations.end());
  return s;
}

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Pool: return "pool";
    case LayerKind::Upsample: return "upsample";
    case LayerKind::Identity: return "identity";
  }
  return "?";
}

std::string to_string(Topology topology) { return topology == Topology::Dense ? "dense" : "parallel"; }

std::string format_chain(const std::vector<RFState>& states) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %6s %8s %6s %6s\n", "layer", "k_eff", "R", "jump", "stride");
  os << line;
  for (const auto& s : states) {
    std::snprintf(line, sizeof line, "%-28s %6d %8lld %6lld %6lld\n", s.name.c_str(), s.effective_kernel,
                  static_cast<long long>(s.receptive_field), static_cast<long long>(s.jump),
                  static_cast<long long>(s.output_stride));
    os << line;
  }
  return os.str();
}

namespace {
template <typename Range>
std::string join(const Range& values) {
  std::ostringstream os;
  bool first = true;
  for (const auto& v : values) {
    os << (first ? "" : ", ") << v;
    first = false;
  }
  return os.str();
}
}  // namespace

std::string format_pyramid(const PyramidScales& s) {
  std::ostringstream os;
  os << "pyramid topology: " << to_string(s.topology) << "\n";
  os << "rates: " << join(s.rates) << "\n";
  os << "effective kernels: " << join(s.effective_kernels) << "\n";
  os << "combinations: " << s.combinations.size() << "\n";
  os << "combination RFs: " << join(s.combinations) << "\n";
  os << "distinct RFs (" << s.distinct.size() << "): " << join(s.distinct) << "\n";
  os << "max RF " << s.max_rf << ", combinations " << s.combinations.size() << "\n";
  return os.str();
}

nlohmann::json chain_to_json(const std::vector<RFState>& states) {
  auto arr = nlohmann::json::array();
  for (const auto& s : states) {
    arr.push_back({{"name", s.name},
                   {"k_eff", s.effective_kernel},
                   {"receptive_field", s.receptive_field},
                   {"jump", s.jump},
                   {"output_stride", s.output_stride}});
  }
  return arr;
}

nlohmann::json pyramid_to_json(const PyramidScales& s) {
  return {{"topology", to_string(s.topology)},
          {"rates", s.rates},
          {"effective_kernels", s.effective_kernels},
          {"combinations", s.combinations},
          {"combination_count", s.combinations.size()},
          {"distinct", std::vector<std::int64_t>(s.distinct.begin(), s.distinct.end())},
          {"max_rf", s.max_rf}};
}

}  // namespace scinet::rf
