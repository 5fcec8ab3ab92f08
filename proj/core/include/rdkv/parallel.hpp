#pragma once

#include <functional>

namespace rdkv {

/// Worker count: RDKV_THREADS when set (>= 1), otherwise hardware
/// concurrency.
int worker_count();

/// Runs fn(0..n-1) across workers. Each index must write only its own
/// output slot; results are then independent of scheduling.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace rdkv
