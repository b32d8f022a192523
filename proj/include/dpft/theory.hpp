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

// Closed-form convergence bounds, the noise-scale assumption, regime
// prediction, and layer sensitivities for the two-layer linear network.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>

#include "dpft/core.hpp"
#include "dpft/diffusion.hpp"
#include "dpft/params.hpp"

namespace dpft {

struct ScaleConditionReport {
  bool ok = false;
  double beta_floor = 0.0;
  double sigma_ceiling = 0.0;  // ceiling on sigma^2
  double terms[3] = {0.0, 0.0, 0.0};
  bool beta_ok = false;
  bool sigma_ok = false;
};

inline ScaleConditionReport check_scale_condition(const BoundParams& p) {
  p.validate();
  ScaleConditionReport r;
  const double k = static_cast<double>(p.k), d = static_cast<double>(p.d);
  const double h = p.norm_XtY, kb = k * p.beta;
  r.beta_floor = (-h + std::sqrt(h * h + 4.0 * (1.0 + d) * h + 4.0 * d)) / (2.0 * k);
  r.terms[0] = (kb + p.head_signal()) / (2.0 * k);
  r.terms[1] = (kb - 1.0) / (std::numbers::sqrt2 * (1.0 + d));
  r.terms[2] = (kb * (kb + h * h) / ((1.0 + d) * h + d) - 1.0) / (1.0 + std::numbers::sqrt2 * (1.0 + d));
  r.sigma_ceiling = std::min({r.terms[0], r.terms[1], r.terms[2]});
  r.beta_ok = p.beta > r.beta_floor;
  r.sigma_ok = p.sigma2() < r.sigma_ceiling;
  r.ok = r.beta_ok && r.sigma_ok;
  return r;
}

inline double initial_loss_expectation(const BoundParams& p) {
  return 0.5 * (static_cast<double>(p.k) * p.beta + p.norm_Y * p.norm_Y);
}

// E[L_lp(t)] <= (k beta + ||Y||^2)/2 e^{-t} + (gamma + k sigma^2)(1 - e^{-t}).
inline double lp_loss_bound(double t, const BoundParams& p) {
  if (t < 0.0) throw ParameterError("t must be >= 0");
  const double e = std::exp(-t);
  return initial_loss_expectation(p) * e + (p.gamma + static_cast<double>(p.k) * p.sigma2()) * (1.0 - e);
}

struct FtBound {
  double value;
  double c;
  double L_square;
};

inline FtBound ft_bound_from(double t, double c, double numerator, const BoundParams& p, const char* form) {
  if (t < 0.0) throw ParameterError("t must be >= 0");
  if (!(c > 0.0))
    throw AssumptionError(fmt::format("{} rate c = {:.6g} <= 0; the noise ceiling on sigma^2 is violated", form, c));
  const double Lsq = p.sigma2() * numerator / c;
  const double e = std::exp(-c * t);
  return {initial_loss_expectation(p) * e + Lsq * (1.0 - e), c, Lsq};
}

// c = k beta - 1 - sqrt(2) sigma^2 (1 + d), L = sigma^2 ((1+d)||X^T Y|| + d) / c.
inline FtBound ft_loss_bound(double t, const BoundParams& p) {
  const double d = static_cast<double>(p.d);
  const double c = static_cast<double>(p.k) * p.beta - 1.0 - std::numbers::sqrt2 * p.sigma2() * (1.0 + d);
  return ft_bound_from(t, c, (1.0 + d) * p.norm_XtY + d, p, "fine-tuning");
}

// Same bound in terms of the extreme eigenvalues of the initial imbalance:
// c = lambda_max - sqrt(2) sigma^2 (1+d), L = sigma^2 ((1+d)||X^T Y|| - d lambda_min) / c.
inline FtBound ft_loss_bound_eigen(double t, const BoundParams& p, double lambda_max, double lambda_min) {
  const double d = static_cast<double>(p.d);
  const double c = lambda_max - std::numbers::sqrt2 * p.sigma2() * (1.0 + d);
  return ft_bound_from(t, c, (1.0 + d) * p.norm_XtY - d * lambda_min, p, "fine-tuning (eigenvalue form)");
}

// E||v(t)||^2 - 1: the non-trivial eigenvalue of D after linear probing.
inline double lp_lambda_max_expectation(double t_lp, const BoundParams& p) {
  return lp_vnorm_closed_form(t_lp, p) - 1.0;
}

// E[L(t)] <= E[L_lp] e^{-ct} + L (1 - e^{-ct}), c = E[lambda_max(D)] after probing.
inline double lpft_loss_bound(double t_lp, double t, const BoundParams& p, double loss_after_lp,
                              std::optional<double> lambda_max = std::nullopt) {
  if (t_lp < 0.0 || t < 0.0) throw ParameterError("t_lp and t must be >= 0");
  const double c = lambda_max ? *lambda_max : lp_lambda_max_expectation(t_lp, p);
  if (!(c > 0.0))
    throw AssumptionError(fmt::format("LP-FT rate E[lambda_max(D)] = {:.6g} must be positive", c));
  const double d = static_cast<double>(p.d);
  const double Lsq = p.sigma2() * ((1.0 + d) * p.norm_XtY + d) / c;
  const double e = std::exp(-c * t);
  return loss_after_lp * e + Lsq * (1.0 - e);
}

enum class Strategy { lp, lpft, ft };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::lp: return "LP";
    case Strategy::lpft: return "LPFT";
    case Strategy::ft: return "FT";
  }
  return "?";
}

struct RegimeVerdict {
  Strategy best = Strategy::ft;
  double log_argument = 0.0;                           // 3 + k (sigma^2 - beta) / ||B0 X^T Y||^2
  std::optional<double> t_max;                         // ln of the above when positive
  std::optional<std::pair<double, double>> sigma2_interval;
  std::optional<std::pair<double, double>> t_lp_window;
};

inline RegimeVerdict lpft_window(const BoundParams& p, double total_T) {
  p.validate();
  if (!(total_T > 0.0)) throw ParameterError("total horizon must be > 0");
  const double a = p.head_signal();
  if (!(a > 0.0)) throw PreconditionError("degenerate features: B0 X^T Y = 0");
  const double k = static_cast<double>(p.k);
  RegimeVerdict v;
  v.log_argument = 3.0 + k * (p.sigma2() - p.beta) / a;
  v.sigma2_interval = std::make_pair(p.beta - 2.0 * a / k, p.beta + (std::exp(total_T) - 3.0) * a / k);
  if (v.log_argument > 0.0) v.t_max = std::log(v.log_argument);
  if (!v.t_max || *v.t_max <= 0.0) {
    v.best = Strategy::ft;
  } else if (total_T < *v.t_max) {
    v.best = Strategy::lp;
  } else {
    v.best = Strategy::lpft;
    v.t_lp_window = std::make_pair(0.0, *v.t_max);
  }
  return v;
}

// Asymptotic comparison: gamma + k sigma^2 < L (strict).
inline bool lp_better_condition(const BoundParams& p) {
  const auto lim = ft_loss_bound(0.0, p);
  return p.gamma + static_cast<double>(p.k) * p.sigma2() < lim.L_square;
}

struct SensitivityBounds {
  double head_ub;
  double features_ub;
};

// Worst case over pairs of normalized datasets, ||X'^T Y' - X^T Y|| <= 2.
inline SensitivityBounds sensitivity_bounds(const TwoLayerModel& m, const Dataset& ds) {
  check_shapes(m, ds);
  if (!ds.unit_labels()) throw PreconditionError("sensitivity bounds need unit-norm labels");
  return {2.0 * m.B().norm(), 2.0 * m.v().norm()};
}

struct GradientGap {
  double head;
  double features;
};

// Norms of the gradient differences between two datasets at one model.
inline GradientGap gradient_gap(const TwoLayerModel& m, const Dataset& a, const Dataset& b) {
  check_shapes(m, a);
  check_shapes(m, b);
  return {(grad_head(m, a) - grad_head(m, b)).norm(), (grad_features(m, a) - grad_features(m, b)).norm()};
}

struct SensitivityRatio {
  double head_mean = 0.0;      // Delta(grad_v)
  double features_mean = 0.0;  // mean Delta(grad_B)
  double features_se = 0.0;
  double ratio_mean = 0.0;     // Delta_v / mean Delta_B
  double ratio_over_sqrt_d = 0.0;
  bool in_theta_band = false;
  std::pair<double, double> head_band;      // [sqrt2 k, 2k]
  std::pair<double, double> features_band;  // [k sqrt(2/d), 2k/sqrt(d)]
  std::pair<double, double> ratio_band{1.0 / std::numbers::sqrt2, std::numbers::sqrt2};
  bool head_in_band = false;
  bool features_in_band = false;
};

// Local sensitivities at initialization (beta = k / sqrt(d)), each attained
// by an explicit extremal pair: Y' = -Y with X^T Y aligned to a row of B0
// for the head, and with X^T Y any unit vector for the features.
inline SensitivityRatio sensitivity_ratio_at_init(Eigen::Index k, Eigen::Index d, std::size_t seeds,
                                                  std::uint64_t seed = 0) {
  if (k < 1 || k > d) throw DimensionError("need 1 <= k <= d");
  if (seeds == 0) throw ParameterError("seeds must be >= 1");
  const double kd = static_cast<double>(k), dd = static_cast<double>(d);
  const double beta = kd / std::sqrt(dd);
  RunningStats head, feat;
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t sd = replica_seed(seed, s);
    Rng rng = derive_rng(sd, {kStreamSensitivity});
    const Matrix X = random_orthogonal(d, rng);
    const Matrix b0 = random_orthonormal_rows(k, d, rng);
    const TwoLayerModel m(init_head(k, {beta, sd, true}), b0);
    const Vector yh = X * b0.row(0).transpose();
    const Vector u = gaussian_vector(d, rng);
    const Vector yf = X * (u / u.norm());
    const double gh = gradient_gap(m, Dataset(X, yh, true), Dataset(X, -yh, true)).head;
    const double gf = gradient_gap(m, Dataset(X, yf, true), Dataset(X, -yf, true)).features;
    head.add(gh);
    feat.add(gf);
  }
  SensitivityRatio r;
  r.head_mean = head.mean;
  r.features_mean = feat.mean;
  r.features_se = feat.standard_error();
  r.ratio_mean = r.features_mean > 0.0 ? r.head_mean / r.features_mean : std::numeric_limits<double>::infinity();
  r.ratio_over_sqrt_d = r.ratio_mean / std::sqrt(dd);
  r.head_band = {std::numbers::sqrt2 * kd, 2.0 * kd};
  r.features_band = {kd * std::sqrt(2.0 / dd), 2.0 * kd / std::sqrt(dd)};
  r.in_theta_band = r.ratio_over_sqrt_d >= r.ratio_band.first && r.ratio_over_sqrt_d <= r.ratio_band.second;
  r.head_in_band = r.head_mean >= r.head_band.first && r.head_mean <= r.head_band.second;
  r.features_in_band = r.features_mean >= r.features_band.first && r.features_mean <= r.features_band.second;
  return r;
}

}  // namespace dpft
