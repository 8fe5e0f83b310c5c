#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stemnet {

// Worker count for the loops below. 0 keeps the OpenMP default.
void set_threads(int n);
int thread_count();

// Parallel loop over independent indices. Every index is processed by exactly
// one worker and any reduction an op needs happens serially inside its own
// index, so results are bit-identical no matter the thread count or schedule.
template <typename F>
void parallel_for(std::int64_t n, F&& body) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) body(i);
#else
  for (std::int64_t i = 0; i < n; ++i) body(i);
#endif
}

// Chunked variant for elementwise sweeps; chunk boundaries depend only on n.
template <typename F>
void parallel_for_range(std::int64_t n, F&& body) {
  constexpr std::int64_t kChunk = 1 << 16;
  const std::int64_t chunks = (n + kChunk - 1) / kChunk;
  parallel_for(chunks, [&](std::int64_t c) {
    const std::int64_t lo = c * kChunk;
    body(lo, lo + kChunk < n ? lo + kChunk : n);
  });
}

}  // namespace stemnet
