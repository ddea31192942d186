#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace p2mam {

inline std::size_t default_threads() {
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Splits [0, count) into `chunks` contiguous ranges and runs
// fn(begin, end, chunk) for each, using up to `threads` workers. The chunk
// layout depends only on count and chunks, so callers that reduce per-chunk
// results in chunk order get identical output for any thread count. The
// first exception thrown by a chunk is rethrown after all workers join.
template <typename Fn>
void for_each_chunk(std::size_t count, std::size_t chunks, std::size_t threads, Fn&& fn) {
  chunks = std::max<std::size_t>(1, std::min(chunks, count));
  const auto bounds = [&](std::size_t c) { return c * count / chunks; };
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) {
    for (std::size_t c = 0; c < chunks; ++c) fn(bounds(c), bounds(c + 1), c);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> workers;
  workers.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += threads) fn(bounds(c), bounds(c + 1), c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace p2mam
