#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace tsattn {

namespace detail {
inline std::atomic<unsigned>& thread_cap() {
  static std::atomic<unsigned> cap{[] {
    if (const char* env = std::getenv("TSATTN_THREADS")) {
      try {
        int n = std::stoi(env);
        if (n > 0) return static_cast<unsigned>(n);
      } catch (...) {
      }
    }
    return 1u;
  }()};
  return cap;
}
}  // namespace detail

inline unsigned thread_count() { return detail::thread_cap().load(); }
inline void set_thread_count(unsigned n) { detail::thread_cap().store(std::max(1u, n)); }

/// Runs fn(i) for i in [0, n). Each index must write disjoint output so the
/// result is identical to the sequential loop regardless of thread count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace tsattn
