#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace radnet {

/// Worker cap. Reads RADNET_THREADS once; unset or invalid means hardware concurrency.
inline std::size_t max_threads() {
  static const std::size_t cap = [] {
    std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("RADNET_THREADS")) {
      try {
        long v = std::stol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return hw;
  }();
  return cap;
}

/// Runs body(begin, end) over disjoint chunks of [0, n). Each index is processed by
/// exactly one call, so results do not depend on the thread count as long as the
/// body writes only to its own indices.
template <typename Body>
void parallel_for(std::size_t n, std::size_t min_chunk, Body&& body) {
  std::size_t workers = std::min(max_threads(), min_chunk == 0 ? n : n / min_chunk);
  if (workers <= 1) {
    if (n > 0) body(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t begin = w * chunk;
    std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(std::size_t{0}, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace radnet
