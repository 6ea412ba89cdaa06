#pragma once

#include <cstddef>
#include <functional>

namespace htmdp {

// Worker count: HTMDP_THREADS if set and positive, else hardware concurrency.
std::size_t worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads. Exceptions from
// workers are rethrown (the one with the smallest index wins).
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace htmdp
