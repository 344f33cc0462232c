#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace ewa {

// Process-wide thread budget; the CLI --threads flag sets it once at startup.
inline int& thread_budget() {
  static int budget = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return budget;
}

// Runs fn(i) for i in [0, n). Work items own their outputs (pre-allocated
// slots indexed by i), so the result is identical for any thread count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         int threads = 0) {
  if (threads <= 0) threads = thread_budget();
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const int k = static_cast<int>(std::min<std::size_t>(threads, n));
  pool.reserve(k);
  for (int t = 0; t < k; ++t) {
    pool.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace ewa
