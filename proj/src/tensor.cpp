#include "scinet/tensor.hpp"

#include <atomic>

namespace scinet {

namespace {
std::atomic<bool> g_finite_checks{false};
}

std::string Shape::str() const {
  return "(" + std::to_string(n) + ", " + std::to_string(c) + ", " + std::to_string(h) + ", " +
         std::to_string(w) + ")";
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

template <typename T>
void check_finite(const BasicTensor<T>& t, const char* where) {
  if (!finite_checks_enabled()) return;
  const auto& s = t.shape();
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t[i])) {
      const std::size_t w = i % s.w;
      const std::size_t h = (i / s.w) % s.h;
      const std::size_t c = (i / s.plane()) % s.c;
      const std::size_t n = i / (s.plane() * s.c);
      throw NumericalError(std::string(where) + ": non-finite value at (" + std::to_string(n) + ", " +
                           std::to_string(c) + ", " + std::to_string(h) + ", " + std::to_string(w) + ")");
    }
  }
}

template void check_finite(const BasicTensor<float>&, const char*);
template void check_finite(const BasicTensor<double>&, const char*);

}  // namespace scinet
