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

#include "dpft/core.hpp"

namespace dpft {

// Scalar summary of an instance feeding every closed-form bound.
struct BoundParams {
  Eigen::Index k = 1;
  Eigen::Index d = 1;
  double beta = 1.0;
  double sigma = 0.0;
  double gamma = 0.0;       // pretraining quality gamma(B0)
  double norm_Y = 1.0;      // ||Y||
  double norm_XtY = 1.0;    // ||X^T Y||
  double norm_B0XtY = 1.0;  // ||B0 X^T Y||

  double sigma2() const { return sigma * sigma; }
  double head_signal() const { return norm_B0XtY * norm_B0XtY; }

  void validate() const {
    if (k < 1 || d < 1) throw ParameterError("k and d must be >= 1");
    if (!(beta > 0.0)) throw ParameterError("beta must be > 0");
    if (sigma < 0.0) throw ParameterError("sigma must be >= 0");
    if (gamma < 0.0 || norm_Y < 0.0 || norm_XtY < 0.0 || norm_B0XtY < 0.0)
      throw ParameterError("norms and gamma must be >= 0");
  }

  // Builds the tuple from an instance; enforces the projection chain
  // ||B0 X^T Y|| <= ||X^T Y|| <= ||Y|| to 1e-10.
  static BoundParams from_instance(const Dataset& ds, const Matrix& b0, double beta, double sigma) {
    BoundParams p;
    p.k = b0.rows();
    p.d = ds.d();
    p.beta = beta;
    p.sigma = sigma;
    p.gamma = dpft::gamma(b0, ds);
    p.norm_Y = ds.Y().norm();
    p.norm_XtY = ds.xty().norm();
    p.norm_B0XtY = (b0 * ds.xty()).norm();
    constexpr double tol = 1e-10;
    if (p.norm_B0XtY > p.norm_XtY + tol || p.norm_XtY > p.norm_Y + tol)
      throw PreconditionError(fmt::format("projection chain violated: {:.12g} <= {:.12g} <= {:.12g}",
                                          p.norm_B0XtY, p.norm_XtY, p.norm_Y));
    p.validate();
    return p;
  }
};

}  // namespace dpft
