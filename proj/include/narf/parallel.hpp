#pragma once

#include <cstddef>
#include <functional>

namespace narf {

// Worker count: NARF_THREADS if set to a positive integer, otherwise the
// hardware concurrency (at least 1).
std::size_t thread_count();
void set_thread_count(std::size_t n);  // 0 restores the default

// Runs fn(i) for i in [0, n). Tasks are claimed dynamically, so callers must
// write results to per-task slots and reduce them afterwards in index order.
// The first exception thrown by a task is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace narf
