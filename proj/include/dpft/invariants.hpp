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

// The imbalance matrix D = v v^T - B B^T: snapshots, drift estimates from
// ensembles, and the norm / eigenvalue sandwiches it implies.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "dpft/core.hpp"
#include "dpft/diffusion.hpp"

namespace dpft {

// Repository-wide statistical pass threshold (standard errors).
inline constexpr double kPassSigmas = 3.0;

struct ImbalanceSnapshot {
  double time = 0.0;
  Matrix D;
  Vector eigenvalues;   // ascending
  Matrix eigenvectors;  // columns match eigenvalues
};

inline ImbalanceSnapshot imbalance(const TwoLayerModel& m, double time = 0.0) {
  ImbalanceSnapshot snap;
  snap.time = time;
  const Matrix raw = m.v() * m.v().transpose() - m.B() * m.B().transpose();
  snap.D = 0.5 * (raw + raw.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(snap.D);
  snap.eigenvalues = solver.eigenvalues();
  snap.eigenvectors = solver.eigenvectors();
  return snap;
}

struct LpEigenvalues {
  double min_eig;
  double top_eig;
};

// With orthonormal frozen features, D = v v^T - I has eigenvalue -1 on the
// complement of v (k >= 2) and ||v||^2 - 1 along v.
inline LpEigenvalues lp_imbalance_eigs(const TwoLayerModel& m) {
  const Eigen::Index k = m.k();
  const double err = (m.B() * m.B().transpose() - Matrix::Identity(k, k)).cwiseAbs().maxCoeff();
  if (err > 1e-8) throw PreconditionError(fmt::format("B B^T deviates from identity by {:.3g}", err));
  const auto snap = imbalance(m);
  const double lo = snap.eigenvalues[0], hi = snap.eigenvalues[k - 1];
  const double expected_top = m.v().squaredNorm() - 1.0;
  const double tol = 1e-8 * std::max(1.0, m.v().squaredNorm());
  if (std::abs(hi - expected_top) > tol)
    throw std::logic_error(fmt::format("top eigenvalue {:.12g} != ||v||^2 - 1 = {:.12g}", hi, expected_top));
  if (k >= 2 && std::abs(lo + 1.0) > tol)
    throw std::logic_error(fmt::format("minimum eigenvalue {:.12g} != -1", lo));
  return {lo, hi};
}

// d E[D] / dt for the fine-tuning diffusions. The gradient-flow part of the
// drift cancels exactly; the Ito corrections are 2 sigma^2 s I from the head
// (s = 1, or d when layerwise) and -2 sigma^2 d I from the features.
inline Matrix expected_imbalance_drift(DiffusionKind kind, double sigma, Eigen::Index k, Eigen::Index d) {
  if (kind == DiffusionKind::lp) throw ParameterError("imbalance drift is not constant under linear probing");
  const double s = kind == DiffusionKind::ft_layerwise ? static_cast<double>(d) : 1.0;
  return 2.0 * sigma * sigma * (s - static_cast<double>(d)) * Matrix::Identity(k, k);
}

struct DriftEstimate {
  double t0 = 0.0, t1 = 0.0;
  Matrix slope;
  Matrix se;
  double trace_slope = 0.0, trace_se = 0.0;
};

inline const WindowSlopes& find_window(const EnsembleStats& stats, std::pair<double, double> window) {
  const auto a = stats.grid_index(window.first), b = stats.grid_index(window.second);
  if (!(window.second > window.first)) throw ParameterError("window needs t1 > t0");
  if (!a || !b) throw ParameterError(fmt::format("window [{}, {}] is off the recorded grid", window.first, window.second));
  for (const auto& w : stats.windows)
    if (w.i0 == *a && w.i1 == *b) return w;
  throw ParameterError(fmt::format("window [{}, {}] was not tracked; list it in EnsembleOptions::windows",
                                   window.first, window.second));
}

// OLS slope of the mean imbalance entries over the window, with standard
// errors from the spread of the per-replica slopes.
inline DriftEstimate estimate_imbalance_drift(const EnsembleStats& stats, std::pair<double, double> window) {
  const auto& w = find_window(stats, window);
  if (stats.replicas < 2) throw ParameterError("need at least two replicas for standard errors");
  return {w.t0, w.t1, w.imbalance_slope, w.imbalance_se, w.trace_slope, w.trace_se};
}

struct DriftRow {
  Eigen::Index i, j;
  double slope, se, target;
  bool pass;
};

inline std::vector<DriftRow> drift_rows(const DriftEstimate& est, const Matrix& target,
                                        double sigmas = kPassSigmas) {
  std::vector<DriftRow> rows;
  for (Eigen::Index i = 0; i < est.slope.rows(); ++i)
    for (Eigen::Index j = 0; j < est.slope.cols(); ++j) {
      const double s = est.slope(i, j), e = est.se(i, j), t = target(i, j);
      rows.push_back({i, j, s, e, t, std::abs(s - t) <= sigmas * e});
    }
  return rows;
}

inline std::string drift_rows_to_csv(const std::vector<DriftRow>& rows) {
  std::string out = "i,j,slope,SE,target,pass\n";
  for (const auto& r : rows)
    out += fmt::format("{},{},{:.10g},{:.10g},{:.10g},{}\n", r.i, r.j, r.slope, r.se, r.target, r.pass ? 1 : 0);
  return out;
}

struct EigenDriftReport {
  Vector slope, se;
  double target = 0.0;
  std::vector<bool> pass;
  double trace_slope = 0.0, trace_se = 0.0, trace_target = 0.0;
  bool trace_pass = false;
  std::size_t near_crossings = 0;  // flagged, not resolved
  bool all_pass() const {
    return trace_pass && std::all_of(pass.begin(), pass.end(), [](bool b) { return b; });
  }
};

// Slopes of the mean sorted eigenvalues of D against the per-eigenvalue
// drift rate of D's diagonal; tr(D) is checked alongside since it is exact.
inline EigenDriftReport eigen_drift_check(const EnsembleStats& stats, std::pair<double, double> window) {
  if (stats.kind == DiffusionKind::lp) throw ParameterError("eigenvalue drift law applies to fine-tuning");
  const auto& w = find_window(stats, window);
  if (w.eigen_slope.size() == 0) throw ParameterError("ensemble was run without track_eigenvalues");
  EigenDriftReport rep;
  rep.slope = w.eigen_slope;
  rep.se = w.eigen_se;
  rep.target = expected_imbalance_drift(stats.kind, stats.sigma, 1, stats.d)(0, 0);
  for (Eigen::Index a = 0; a < rep.slope.size(); ++a)
    rep.pass.push_back(std::abs(rep.slope[a] - rep.target) <= kPassSigmas * rep.se[a]);
  rep.trace_slope = w.trace_slope;
  rep.trace_se = w.trace_se;
  rep.trace_target = rep.target * static_cast<double>(stats.k);
  rep.trace_pass = std::abs(rep.trace_slope - rep.trace_target) <= kPassSigmas * rep.trace_se;
  rep.near_crossings = w.near_crossings;
  return rep;
}

struct NormSandwich {
  double lower, value, upper;
};

// (l + sqrt(l^2 + 4||w||^2))/2 <= ||v||^2 <= (u + sqrt(u^2 + 4||w||^2))/2,
// l, u the extreme eigenvalues of D and w = B^T v.
inline NormSandwich vnorm_bounds_from_imbalance(const TwoLayerModel& m) {
  const auto snap = imbalance(m);
  const double lo = snap.eigenvalues[0], hi = snap.eigenvalues[snap.eigenvalues.size() - 1];
  const double w2 = (m.B().transpose() * m.v()).squaredNorm();
  NormSandwich s{0.5 * (lo + std::sqrt(lo * lo + 4.0 * w2)), m.v().squaredNorm(),
                 0.5 * (hi + std::sqrt(hi * hi + 4.0 * w2))};
  const double tol = 1e-8 * std::max({1.0, s.value, std::abs(lo), std::abs(hi)});
  if (s.lower > s.value + tol || s.value > s.upper + tol)
    throw std::logic_error(fmt::format("norm sandwich violated: {:.12g} <= {:.12g} <= {:.12g}", s.lower, s.value, s.upper));
  return s;
}

struct EigenInterval {
  double lambda, lower, upper;
};

// Each nonzero eigenvalue lambda_i of B^T B lies in
// [(-u + sqrt(u^2 + 4 (z_i^T w)^2))/2, (-l + sqrt(l^2 + 4 (z_i^T w)^2))/2].
inline std::vector<EigenInterval> btb_eigen_bounds(const TwoLayerModel& m) {
  const auto snap = imbalance(m);
  const double lo = snap.eigenvalues[0], hi = snap.eigenvalues[snap.eigenvalues.size() - 1];
  const Vector w = m.B().transpose() * m.v();
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m.B().transpose() * m.B());
  std::vector<EigenInterval> out;
  for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
    const double lam = solver.eigenvalues()[i];
    if (lam <= 1e-10) continue;
    const double zw = solver.eigenvectors().col(i).dot(w);
    EigenInterval iv{lam, 0.5 * (-hi + std::sqrt(hi * hi + 4.0 * zw * zw)), 0.5 * (-lo + std::sqrt(lo * lo + 4.0 * zw * zw))};
    const double tol = 1e-8 * std::max({1.0, lam, std::abs(lo), std::abs(hi)});
    if (iv.lower > lam + tol || lam > iv.upper + tol)
      throw std::logic_error(fmt::format("B^T B eigenvalue {:.12g} outside [{:.12g}, {:.12g}]", lam, iv.lower, iv.upper));
    out.push_back(iv);
  }
  return out;
}

}  // namespace dpft
