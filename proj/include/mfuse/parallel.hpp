#pragma once

#include <cstddef>
#include <functional>

namespace mfuse {

/// Worker cap from FUSION_NUM_THREADS (default: hardware concurrency).
std::size_t num_threads();

/// Runs fn(begin, end) over disjoint chunks of [0, n). Each index is handled
/// by exactly one call, so results are independent of the thread count as
/// long as fn writes only to its own indices.
void parallel_for(std::size_t n, std::size_t min_chunk, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace mfuse
