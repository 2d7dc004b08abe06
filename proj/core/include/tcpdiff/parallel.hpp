#pragma once

#include <cstddef>
#include <functional>

namespace tcpdiff {

/// Worker cap from TCPDIFF_THREADS; 1 when unset or unparsable.
unsigned worker_threads();

/// Runs body(i) for i in [0, count) on up to `threads` threads. Work items must be
/// independent; results must be written to preassigned slots so the outcome does not
/// depend on scheduling. The first exception thrown by any item is rethrown.
void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body);

}  // namespace tcpdiff
