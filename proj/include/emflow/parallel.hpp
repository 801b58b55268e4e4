#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "emflow/types.hpp"

namespace emflow {

/// Worker count from EMFLOW_THREADS, defaulting to 1.
inline int default_thread_count() {
  if (const char* env = std::getenv("EMFLOW_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

/// Calls fn(begin, end) over fixed-size chunks of [0, n). Chunk boundaries do
/// not depend on `threads`, so results are identical for any worker count.
template <typename Fn>
void parallel_for_chunks(Index n, Index chunk, int threads, Fn&& fn) {
  if (n <= 0) return;
  chunk = std::max<Index>(1, chunk);
  const Index chunks = (n + chunk - 1) / chunk;
  const int workers = static_cast<int>(std::clamp<Index>(threads, 1, chunks));
  if (workers == 1) {
    for (Index c = 0; c < chunks; ++c) fn(c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (Index c = w; c < chunks; c += workers) {
        try {
          fn(c * chunk, std::min(n, (c + 1) * chunk));
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace emflow
