#pragma once

#include <cstddef>
#include <functional>

namespace hybridsel {

// Process-wide worker cap. Results never depend on it: callers write into
// pre-sized slots and reduce in index order.
void set_num_threads(int n);
int num_threads();

// Runs fn(i) for i in [0, n) on up to num_threads() workers. The first
// exception thrown by any task is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace hybridsel
