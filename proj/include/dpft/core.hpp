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

// Regression data, the two-layer linear model f(x) = <v, Bx>, its loss and
// gradients, pretraining quality gamma(B), and seeded instance generators.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "dpft/error.hpp"
#include "dpft/rng.hpp"

namespace dpft {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kOrthonormalTol = 1e-10;
inline constexpr double kPinvCutoff = 1e-10;

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

inline Vector gaussian_vector(Eigen::Index size, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  Vector out(size);
  for (Eigen::Index i = 0; i < size; ++i) out[i] = normal(rng);
  return out;
}

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix out(rows, cols);
  // Row-major fill order so draws map onto the serialized layout.
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = normal(rng);
  return out;
}

// Orthogonal factor of a seeded Gaussian square matrix, sign-normalized so
// that R has a positive diagonal (makes the draw Haar-distributed).
inline Matrix random_orthogonal(Eigen::Index n, Rng& rng) {
  const Matrix g = gaussian_matrix(n, n, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

inline double orthonormality_error(const Matrix& q_cols) {
  const Eigen::Index c = q_cols.cols();
  return (q_cols.transpose() * q_cols - Matrix::Identity(c, c)).cwiseAbs().maxCoeff();
}

// Labels drawn as an unconstrained Gaussian vector, or as X z for Gaussian z
// (labels in the column span of X, so full fine-tuning can reach zero loss).
enum class LabelModel { gaussian, realizable };

class Dataset {
 public:
  // Validates n >= d, X^T X = I (1e-10) and, when unit_labels, ||Y|| = 1.
  Dataset(Matrix x, Vector y, bool unit_labels = false) : x_(std::move(x)), y_(std::move(y)), unit_labels_(unit_labels) {
    if (x_.rows() != y_.size())
      throw DimensionError(fmt::format("X has {} rows but Y has {} entries", x_.rows(), y_.size()));
    if (x_.cols() < 1 || x_.rows() < x_.cols())
      throw DimensionError(fmt::format("need n >= d >= 1, got n={} d={}", x_.rows(), x_.cols()));
    if (!all_finite(x_) || !y_.allFinite()) throw ParameterError("dataset has non-finite entries");
    gram_ = x_.transpose() * x_;
    const double err = (gram_ - Matrix::Identity(d(), d())).cwiseAbs().maxCoeff();
    if (err > kOrthonormalTol)
      throw PreconditionError(fmt::format("X^T X deviates from identity by {:.3g}", err));
    if (unit_labels_ && std::abs(y_.norm() - 1.0) > kOrthonormalTol)
      throw PreconditionError(fmt::format("unit_labels set but ||Y|| = {:.12g}", y_.norm()));
    xty_ = x_.transpose() * y_;
  }

  const Matrix& X() const { return x_; }
  const Vector& Y() const { return y_; }
  Eigen::Index n() const { return x_.rows(); }
  Eigen::Index d() const { return x_.cols(); }
  bool unit_labels() const { return unit_labels_; }

  // Cached X^T X and X^T Y; drift evaluations only need these.
  const Matrix& gram() const { return gram_; }
  const Vector& xty() const { return xty_; }
  double label_norm2() const { return y_.squaredNorm(); }

 private:
  Matrix x_;
  Vector y_;
  bool unit_labels_;
  Matrix gram_;
  Vector xty_;
};

// X = first d columns of a seeded random orthogonal n x n matrix.
inline Dataset make_dataset(Eigen::Index n, Eigen::Index d, std::uint64_t seed, bool unit_labels,
                            LabelModel labels = LabelModel::gaussian) {
  if (d < 1 || n < d) throw DimensionError(fmt::format("need n >= d >= 1, got n={} d={}", n, d));
  Rng rng_x = derive_rng(seed, {kStreamDatasetX});
  Matrix x = random_orthogonal(n, rng_x).leftCols(d);
  Rng rng_y = derive_rng(seed, {kStreamDatasetY});
  Vector y = labels == LabelModel::gaussian ? gaussian_vector(n, rng_y) : Vector(x * gaussian_vector(d, rng_y));
  if (unit_labels) y /= y.norm();
  return Dataset(std::move(x), std::move(y), unit_labels);
}

class TwoLayerModel {
 public:
  TwoLayerModel(Vector v, Matrix b) : v_(std::move(v)), b_(std::move(b)) {
    if (b_.rows() != v_.size())
      throw DimensionError(fmt::format("head has {} entries but B has {} rows", v_.size(), b_.rows()));
    check_finite();
  }

  const Vector& v() const { return v_; }
  const Matrix& B() const { return b_; }
  Eigen::Index k() const { return v_.size(); }
  Eigen::Index d() const { return b_.cols(); }

  void set_v(Vector v) {
    if (v.size() != v_.size()) throw DimensionError("head size changed");
    v_ = std::move(v);
    check_finite();
  }
  void set_B(Matrix b) {
    if (b.rows() != b_.rows() || b.cols() != b_.cols()) throw DimensionError("feature shape changed");
    b_ = std::move(b);
    check_finite();
  }

  bool operator==(const TwoLayerModel& o) const { return v_ == o.v_ && b_ == o.b_; }

 private:
  void check_finite() const {
    if (!v_.allFinite() || !b_.allFinite()) throw ParameterError("model has non-finite entries");
  }

  Vector v_;
  Matrix b_;
};

struct InitSpec {
  double beta = 1.0;
  std::uint64_t seed = 0;
  bool orthonormal_rows = true;
};

inline void check_shapes(const TwoLayerModel& m, const Dataset& ds) {
  if (m.d() != ds.d())
    throw DimensionError(fmt::format("B has {} columns but data has d={}", m.d(), ds.d()));
}

// 1/2 ||X B^T v - Y||^2, evaluated densely through X.
inline double loss(const TwoLayerModel& m, const Dataset& ds) {
  check_shapes(m, ds);
  return 0.5 * (ds.X() * (m.B().transpose() * m.v()) - ds.Y()).squaredNorm();
}

inline Vector residual(const TwoLayerModel& m, const Dataset& ds) {
  check_shapes(m, ds);
  return ds.X() * (m.B().transpose() * m.v()) - ds.Y();
}

// B X^T (X B^T v - Y)
inline Vector grad_head(const TwoLayerModel& m, const Dataset& ds) {
  return m.B() * (ds.X().transpose() * residual(m, ds));
}

// v (X B^T v - Y)^T X
inline Matrix grad_features(const TwoLayerModel& m, const Dataset& ds) {
  return m.v() * (residual(m, ds).transpose() * ds.X());
}

// Y^T (I - X B^T (X B^T)^+) Y with an SVD pseudoinverse; singular values below
// 1e-10 * sigma_max are treated as zero.
inline double gamma(const Matrix& b, const Dataset& ds) {
  if (b.cols() != ds.d())
    throw DimensionError(fmt::format("B has {} columns but data has d={}", b.cols(), ds.d()));
  const Matrix a = ds.X() * b.transpose();
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU);
  const auto& s = svd.singularValues();
  const double smax = s.size() > 0 ? s.maxCoeff() : 0.0;
  Eigen::Index rank = 0;
  if (smax > 0.0)
    for (Eigen::Index i = 0; i < s.size(); ++i)
      if (s[i] > kPinvCutoff * smax) ++rank;
  if (rank == 0) return ds.label_norm2();
  const Matrix u = svd.matrixU().leftCols(rank);
  return (ds.Y() - u * (u.transpose() * ds.Y())).squaredNorm();
}

// Smallest loss reachable by training only the head on frozen features,
// min_u 1/2 ||X B^T u - Y||^2 = gamma(B) / 2.
inline double min_head_loss(const Matrix& b, const Dataset& ds) { return 0.5 * gamma(b, ds); }

inline Vector init_head(Eigen::Index k, const InitSpec& spec) {
  if (k < 1) throw DimensionError("head dimension must be >= 1");
  if (!(spec.beta > 0.0)) throw ParameterError(fmt::format("beta must be > 0, got {}", spec.beta));
  Rng rng = derive_rng(spec.seed, {kStreamHead});
  return gaussian_vector(k, rng, std::sqrt(spec.beta));
}

// k x d matrix with orthonormal rows, Haar-distributed.
inline Matrix random_orthonormal_rows(Eigen::Index k, Eigen::Index d, Rng& rng) {
  if (k < 1 || k > d) throw DimensionError(fmt::format("need 1 <= k <= d, got k={} d={}", k, d));
  return random_orthogonal(d, rng).leftCols(k).transpose();
}

// Achievable gamma for orthonormal k-row features: gamma = ||Y||^2 - ||B X^T Y||^2.
inline std::pair<double, double> achievable_gamma_range(const Dataset& ds, Eigen::Index k) {
  const double yy = ds.label_norm2();
  const double hh = ds.xty().squaredNorm();
  if (k >= ds.d()) return {yy - hh, yy - hh};
  return {yy - hh, yy};
}

// Orthonormal-row features B0 with gamma(B0) = target_gamma. The first row
// mixes the label direction X^T Y / ||X^T Y|| with an orthogonal direction at
// the angle that realizes the target; the remaining rows come from the
// orthogonal complement of both, and a random k x k rotation mixes the rows.
inline Matrix make_pretrained_features(const Dataset& ds, Eigen::Index k, double target_gamma,
                                       std::uint64_t seed) {
  const Eigen::Index d = ds.d();
  if (k < 1 || k > d) throw DimensionError(fmt::format("need 1 <= k <= d, got k={} d={}", k, d));
  const auto [lo, hi] = achievable_gamma_range(ds, k);
  const double slack = 1e-12 * std::max(1.0, ds.label_norm2());
  if (!(target_gamma >= lo - slack && target_gamma <= hi + slack)) throw InfeasibleError(target_gamma, lo, hi);

  Rng rng = derive_rng(seed, {kStreamFeatures});
  const double hh = ds.xty().squaredNorm();
  Matrix basis;
  if (hh > 0.0) {
    // Orthonormal basis of R^d whose first column is X^T Y / ||X^T Y||.
    Matrix g = gaussian_matrix(d, d, rng);
    g.col(0) = ds.xty() / std::sqrt(hh);
    Eigen::HouseholderQR<Matrix> qr(g);
    basis = qr.householderQ() * Matrix::Identity(d, d);
    if (basis.col(0).dot(ds.xty()) < 0) basis.col(0) *= -1.0;
  } else {
    basis = random_orthogonal(d, rng);
  }

  Matrix rows(k, d);
  const double captured = std::clamp(ds.label_norm2() - target_gamma, 0.0, hh);
  const double cos2 = hh > 0.0 ? captured / hh : 1.0;
  if (hh == 0.0 || cos2 >= 1.0 - 1e-15 || k == d) {
    for (Eigen::Index i = 0; i < k; ++i) rows.row(i) = basis.col(i).transpose();
  } else {
    const double c = std::sqrt(cos2), s = std::sqrt(1.0 - cos2);
    rows.row(0) = (c * basis.col(0) + s * basis.col(1)).transpose();
    for (Eigen::Index i = 1; i < k; ++i) rows.row(i) = basis.col(i + 1).transpose();
  }
  return random_orthogonal(k, rng) * rows;
}

// Repository-wide canonical instance: n=8, d=4, k=3, seed=7, realizable
// unit-norm labels, features capturing half of the label signal.
namespace canonical {
inline constexpr Eigen::Index kN = 8;
inline constexpr Eigen::Index kD = 4;
inline constexpr Eigen::Index kK = 3;
inline constexpr std::uint64_t kSeed = 7;
inline constexpr double kTargetGamma = 0.8;
inline constexpr double kBeta = 1.0;
inline constexpr double kHorizon = 4.0;

inline Dataset dataset() { return make_dataset(kN, kD, kSeed, true, LabelModel::realizable); }
inline Matrix features(const Dataset& ds) { return make_pretrained_features(ds, kK, kTargetGamma, kSeed); }

// Seeded Gaussian (v, B) state on the canonical instance for oracle checks.
inline TwoLayerModel random_state(std::uint64_t seed = kSeed) {
  Rng rng = derive_rng(seed, {kStreamModel});
  Vector v = gaussian_vector(kK, rng);
  Matrix b = gaussian_matrix(kK, kD, rng);
  return TwoLayerModel(std::move(v), std::move(b));
}
}  // namespace canonical

}  // namespace dpft
