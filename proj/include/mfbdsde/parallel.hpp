#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace mfbdsde {

inline std::size_t& thread_width_slot() {
  static std::size_t width = [] {
    if (const char* env = std::getenv("MFBDSDE_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v > 0) return static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return std::size_t{1};
  }();
  return width;
}

inline std::size_t thread_width() { return thread_width_slot(); }
inline void set_thread_width(std::size_t w) { thread_width_slot() = std::max<std::size_t>(1, w); }

// Each index is processed exactly once; callers write to disjoint slots, so
// results do not depend on the width.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t w = std::min(thread_width(), n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr err;
  std::mutex mu;
  const std::size_t chunk = (n + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> g(mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace mfbdsde
