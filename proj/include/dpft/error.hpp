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

#include <stdexcept>
#include <string>

#include <fmt/format.h>

namespace dpft {

// Shape mismatch between matrices / vectors, or n < d.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Out-of-domain scalar parameter (beta <= 0, negative time, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class PreconditionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Requested pretraining quality cannot be realized with orthonormal rows.
class InfeasibleError : public std::invalid_argument {
 public:
  InfeasibleError(double target, double lo, double hi)
      : std::invalid_argument(fmt::format(
            "target_gamma={:.6g} infeasible; achievable range [{:.6g}, {:.6g}]",
            target, lo, hi)),
        target_(target), lo_(lo), hi_(hi) {}
  double target() const { return target_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

 private:
  double target_, lo_, hi_;
};

// A closed-form bound is undefined because its rate constant is not positive.
class AssumptionError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class IntegratorError : public std::runtime_error {
 public:
  IntegratorError(const std::string& what, double time)
      : std::runtime_error(fmt::format("{} at t={:.6g}", what, time)), time_(time) {}
  double time() const { return time_; }

 private:
  double time_;
};

class DivergenceError : public IntegratorError {
 public:
  DivergenceError(double time, long replica = -1)
      : IntegratorError(replica < 0 ? std::string("loss diverged")
                                    : fmt::format("loss diverged in replica {}", replica),
                        time),
        replica_(replica) {}
  long replica() const { return replica_; }

 private:
  long replica_;
};

class OptimizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dpft
