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

#include <cmath>
#include <cstddef>
#include <vector>

namespace dpft {

// Single-pass mean / variance (Welford) with the pairwise merge of Chan et al.,
// so partial accumulators from independent blocks combine associatively.
struct RunningStats {
  std::size_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++count;
    const double delta = x - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (x - mean);
  }

  void merge(const RunningStats& o) {
    if (o.count == 0) return;
    if (count == 0) {
      *this = o;
      return;
    }
    const double n_a = static_cast<double>(count);
    const double n_b = static_cast<double>(o.count);
    const double n = n_a + n_b;
    const double delta = o.mean - mean;
    mean += delta * n_b / n;
    m2 += o.m2 + delta * delta * n_a * n_b / n;
    count += o.count;
  }

  // Unbiased sample variance; 0 for fewer than two samples.
  double variance() const { return count > 1 ? m2 / static_cast<double>(count - 1) : 0.0; }
  double stddev() const { return std::sqrt(variance()); }
  double standard_error() const {
    return count > 0 ? std::sqrt(variance() / static_cast<double>(count)) : 0.0;
  }
};

// Fixed-length bank of RunningStats (one per time point / matrix entry).
class StatsBank {
 public:
  StatsBank() = default;
  explicit StatsBank(std::size_t size) : cells_(size) {}

  std::size_t size() const { return cells_.size(); }
  void add(std::size_t i, double x) { cells_[i].add(x); }
  const RunningStats& operator[](std::size_t i) const { return cells_[i]; }
  RunningStats& operator[](std::size_t i) { return cells_[i]; }

  void merge(const StatsBank& o) {
    if (cells_.empty()) cells_.resize(o.cells_.size());
    for (std::size_t i = 0; i < cells_.size() && i < o.cells_.size(); ++i) cells_[i].merge(o.cells_[i]);
  }

 private:
  std::vector<RunningStats> cells_;
};

}  // namespace dpft
