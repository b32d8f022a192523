/*
 * Copyright 2026 The dpft-lab Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace dpft {

inline unsigned default_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

// Runs fn(block) for block in [0, blocks) on up to `threads` workers.
// Blocks are the unit of determinism: callers accumulate inside a block in a
// fixed order and merge the per-block results by index afterwards, so the
// output never depends on the schedule. The first exception thrown by any
// block (lowest block index) is rethrown.
template <class Fn>
void parallel_blocks(std::size_t blocks, Fn&& fn, unsigned threads = default_threads()) {
  if (blocks == 0) return;
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(blocks)));
  std::vector<std::exception_ptr> errors(blocks);
  if (threads == 1) {
    for (std::size_t b = 0; b < blocks; ++b) {
      try {
        fn(b);
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t b = next++; b < blocks; b = next++) {
          try {
            fn(b);
          } catch (...) {
            errors[b] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Splits [0, count) into `blocks` contiguous ranges of near-equal size.
inline std::pair<std::size_t, std::size_t> block_range(std::size_t count, std::size_t blocks,
                                                       std::size_t b) {
  const std::size_t base = count / blocks, extra = count % blocks;
  const std::size_t lo = b * base + std::min(b, extra);
  return {lo, lo + base + (b < extra ? 1 : 0)};
}

}  // namespace dpft
