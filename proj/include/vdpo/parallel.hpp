#pragma once

#include <cstddef>
#include <functional>

namespace vdpo {

// Worker count from RUN_THREADS (default: hardware concurrency, at least 1).
std::size_t run_threads();

// Calls fn(i) for every i in [0, n) on up to run_threads() threads using a
// static contiguous split. Callers write results into per-index slots so the
// outcome never depends on scheduling. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace vdpo
