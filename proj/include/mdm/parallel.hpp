#pragma once

#include <cstddef>
#include <functional>

namespace mdm {

// Worker cap from MDM_NUM_THREADS (default: hardware concurrency, at least 1).
int worker_threads();

// Runs fn(i) for i in [0, n) across worker_threads() threads. Work items must
// be independent; exceptions are rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace mdm
