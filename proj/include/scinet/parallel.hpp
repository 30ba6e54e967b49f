#pragma once

#include <cstddef>
#include <functional>

namespace scinet {

/// Worker count used by data-parallel loops. Initialised from the
/// SCINET_NUM_THREADS environment variable (default: hardware concurrency).
std::size_t num_threads();
void set_num_threads(std::size_t count);

/// Runs body(i) for i in [0, count), split across worker threads. Each index
/// runs exactly once; callers write to disjoint outputs so the result does
/// not depend on the thread count.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace scinet
