#pragma once

#include <functional>

namespace uniphy {

// Worker cap: min(hardware_concurrency, UNIPHY_THREADS when set).
int worker_count();

// Runs fn(0..n_chunks-1), possibly on several threads. Chunks must be
// independent; callers reduce results in chunk-index order afterwards so
// outputs stay bitwise deterministic regardless of the thread count.
void parallel_chunks(int n_chunks, const std::function<void(int)>& fn);

}  // namespace uniphy
