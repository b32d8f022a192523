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

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace dpft {

using Rng = std::mt19937_64;

// Independent stream for (seed, stream ids...). Every replica, phase and
// helper derives its own engine so results never depend on call order
// across replicas.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> streams = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * streams.size());
  auto push = [&](std::uint64_t x) {
    words.push_back(static_cast<std::uint32_t>(x));
    words.push_back(static_cast<std::uint32_t>(x >> 32));
  };
  push(seed);
  for (auto s : streams) push(s);
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

// Stream tags used with derive_rng.
enum StreamTag : std::uint64_t {
  kStreamDatasetX = 1,
  kStreamDatasetY = 2,
  kStreamFeatures = 3,
  kStreamHead = 4,
  kStreamNoise = 5,
  kStreamBatch = 6,
  kStreamSensitivity = 7,
  kStreamModel = 8,
};

}  // namespace dpft
