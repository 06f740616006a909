#include "vesselseg/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace vesselseg {

namespace {
std::atomic<int> g_threads{1};
thread_local bool t_in_worker = false;
}

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& body) {
  // Nested calls from inside a worker run serially.
  const auto workers = t_in_worker ? 1 : std::min<std::int64_t>(num_threads(), n);
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
  for (std::int64_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      const std::int64_t lo = n * t / workers, hi = n * (t + 1) / workers;
      t_in_worker = true;
      try {
        for (std::int64_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        errors[static_cast<size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace vesselseg
