#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace kgemos {

/// Worker count from KGEMOS_THREADS; defaults to 1 so results never
/// depend on the host.
inline std::size_t thread_count() {
  if (const char* env = std::getenv("KGEMOS_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (...) {
    }
  }
  return 1;
}

/// Runs body(begin, end) over contiguous chunks of [0, n). Each index is
/// handled by exactly one chunk, so per-index results are independent of
/// the thread count. An exception thrown by any chunk is rethrown on the
/// calling thread (the lowest-indexed failing chunk wins).
template <typename Body>
void parallel_for(std::size_t n, std::size_t min_chunk, Body&& body) {
  const std::size_t threads = std::min(thread_count(), std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk)));
  if (threads <= 1) {
    body(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  pool.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, &errors, t, lo, hi] {
      try {
        body(lo, hi);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace kgemos
