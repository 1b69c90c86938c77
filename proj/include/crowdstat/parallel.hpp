#pragma once

#include <cstddef>
#include <functional>

namespace crowdstat {

/// Worker count from CROWDSTAT_THREADS, falling back to hardware concurrency.
unsigned default_thread_count();

/// Runs body(i) for i in [0, n) on up to `threads` workers (0 = default).
/// Indices are handed out dynamically; callers write results into
/// per-index slots so the outcome never depends on scheduling. If bodies
/// throw, the exception from the lowest failing index is rethrown once all
/// in-flight work has finished.
void parallel_for(std::size_t n, unsigned threads,
                  const std::function<void(std::size_t)>& body);

}  // namespace crowdstat
