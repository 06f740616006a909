#pragma once

#include <cstdint>
#include <functional>

namespace vesselseg {

/// Global worker cap used by every internally parallel routine (default 1).
void set_num_threads(int n);
int num_threads();

/// Runs body(i) for i in [0, n) across at most num_threads() workers.
/// Work is split into contiguous blocks; callers must make body(i) write only to
/// slot i so results do not depend on the worker count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& body);

}  // namespace vesselseg
