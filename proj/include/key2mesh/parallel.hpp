#pragma once
// Static-partition data parallelism for per-frame work. Each index is
// handled by exactly one worker, so results do not depend on the count.

#include <cstddef>
#include <functional>

namespace k2m {

/// 0 selects K2M_THREADS when set, otherwise 1.
void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Calls fn(i) for i in [0, n) across num_threads() workers. The first
/// exception thrown by any worker is rethrown after all have joined.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace k2m
