#ifndef MEMFCN_PARALLEL_HPP
#define MEMFCN_PARALLEL_HPP

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace memfcn {

/* Kernel-level worker control.

   Every kernel partitions work over *independent output items* only; the
   reduction order inside each item is fixed by the kernel. That makes the
   result of any parallel_for invocation bit-identical for every worker
   count, which is the contract MEMFCN_THREADS relies on. */

namespace parallel {

inline int env_worker_cap() {
  if (const char* s = std::getenv("MEMFCN_THREADS")) {
    int v = std::atoi(s);
    if (v >= 1) return v;
  }
  return 0;  // unset
}

inline int& worker_count_ref() {
  static int workers = [] {
    int cap = env_worker_cap();
    if (cap >= 1) return cap;
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
  }();
  return workers;
}

inline int workers() { return worker_count_ref(); }

inline void set_workers(int n) { worker_count_ref() = std::max(1, n); }

/// Runs fn(i) for i in [0, n). Items must be independent of each other.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  if (n <= 0) return;
  int nw = std::min<std::int64_t>(workers(), n);
  if (nw <= 1 || n < 4) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(nw);
  std::int64_t chunk = (n + nw - 1) / nw;
  for (int w = 0; w < nw; ++w) {
    std::int64_t lo = w * chunk;
    std::int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace parallel

}  // namespace memfcn

#endif  // MEMFCN_PARALLEL_HPP
