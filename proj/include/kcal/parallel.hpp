#pragma once

#include <cstddef>
#include <functional>

namespace kcal {

// Worker count: hardware concurrency, capped by the KCAL_THREADS environment variable.
std::size_t worker_count();

/// Calls body(begin, end) over disjoint chunks of [0, n). Chunks are independent, so
/// results written per index are identical for any worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace kcal
