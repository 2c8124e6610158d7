#pragma once

#include <cstdint>
#include <functional>

namespace gtsa {

/// Worker count resolved from GTSA_THREADS (0 or unset = hardware).
int thread_count();

/// Runs fn(i) for i in [begin, end) across the pool. Each index is computed
/// by exactly one worker, so results are bit-identical for any thread count.
/// Falls back to a serial loop for small ranges or a single worker.
void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t)>& fn);

/// Chunked variant: fn(lo, hi) over disjoint sub-ranges.
void parallel_for_chunks(int64_t begin, int64_t end,
                         const std::function<void(int64_t, int64_t)>& fn);

}  // namespace gtsa
