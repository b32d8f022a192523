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

// Discrete differentially private gradient descent: per-sample clipping,
// Gaussian noise on the averaged gradient, LP / FT / LP-FT schedules, and a
// composed-Gaussian Renyi accountant.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpft/core.hpp"
#include "dpft/diffusion.hpp"
#include "dpft/parallel.hpp"
#include "dpft/stats.hpp"

namespace dpft {

enum class Adjacency { replace_one, add_remove };

inline std::string to_string(Adjacency a) { return a == Adjacency::replace_one ? "replace_one" : "add_remove"; }

inline Adjacency adjacency_from_string(const std::string& s) {
  if (s == "replace_one") return Adjacency::replace_one;
  if (s == "add_remove") return Adjacency::add_remove;
  throw ParameterError(fmt::format("unknown adjacency '{}'", s));
}

struct DpGdConfig {
  double learning_rate = 0.01;
  double clip_norm = std::numeric_limits<double>::infinity();
  double sigma_noise = 0.0;
  std::size_t steps = 0;
  DiffusionKind mode = DiffusionKind::ft_uniform;  // mode of the post-probing phase
  std::size_t lp_steps = 0;
  std::size_t batch_size = 0;  // 0: full batch
  Adjacency adjacency = Adjacency::replace_one;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ParameterError("learning_rate must be > 0");
    if (!(clip_norm > 0.0)) throw ParameterError("clip_norm must be > 0");
    if (!(sigma_noise >= 0.0) || !std::isfinite(sigma_noise)) throw ParameterError("sigma_noise must be >= 0");
    if (lp_steps > steps) throw ParameterError("lp_steps must not exceed steps");
  }
};

inline Vector clip(const Vector& g, double C) {
  if (!(C > 0.0)) throw ParameterError("clip norm must be > 0");
  const double n = g.norm();
  if (n <= C) return g;
  return g * (C / n);
}

struct Gradient {
  Vector head;
  Matrix features;  // empty (0 x 0) when the features are frozen
  double norm() const { return std::sqrt(head.squaredNorm() + features.squaredNorm()); }
};

// Per-sample gradients of l_i = (x_i^T B^T v - y_i)^2 / 2 over the active
// parameters, clipped jointly to C and averaged over the selected rows. Takes
// raw (X, Y) so that neighboring datasets need not stay orthonormal.
inline Gradient averaged_clipped_gradient(const TwoLayerModel& m, const Matrix& X, const Vector& Y,
                                          bool train_features, double C,
                                          const std::vector<std::size_t>* rows = nullptr) {
  if (X.cols() != m.d() || X.rows() != Y.size()) throw DimensionError("X, Y and the model disagree in shape");
  const Vector u = m.B().transpose() * m.v();
  const std::size_t count = rows ? rows->size() : static_cast<std::size_t>(X.rows());
  if (count == 0) throw ParameterError("empty batch");
  const double vnorm = m.v().norm();
  Vector weights = Vector::Zero(X.rows());
  for (std::size_t q = 0; q < count; ++q) {
    const Eigen::Index i = rows ? static_cast<Eigen::Index>((*rows)[q]) : static_cast<Eigen::Index>(q);
    const double r = X.row(i).dot(u) - Y[i];
    double s = 1.0;
    if (std::isfinite(C)) {
      const double gv = std::abs(r) * (m.B() * X.row(i).transpose()).norm();
      const double gb = train_features ? std::abs(r) * vnorm * X.row(i).norm() : 0.0;
      const double g = std::sqrt(gv * gv + gb * gb);
      if (g > C) s = C / g;
    }
    weights[i] += s * r;
  }
  const double inv = 1.0 / static_cast<double>(count);
  const Vector xtw = X.transpose() * weights;
  Gradient g;
  g.head = inv * (m.B() * xtw);
  if (train_features) g.features = inv * (m.v() * xtw.transpose());
  return g;
}

inline Gradient averaged_clipped_gradient(const TwoLayerModel& m, const Dataset& ds, bool train_features, double C,
                                          const std::vector<std::size_t>* rows = nullptr) {
  return averaged_clipped_gradient(m, ds.X(), ds.Y(), train_features, C, rows);
}

// One update theta <- theta - alpha (g + sigma xi) given standard normal
// draws xi; the head draw is scaled by sqrt(d) in layerwise mode.
inline TwoLayerModel dpgd_step(const TwoLayerModel& m, const Dataset& ds, const DpGdConfig& cfg, DiffusionKind mode,
                               const Vector& noise_v, const Matrix* noise_B,
                               const std::vector<std::size_t>* rows = nullptr) {
  const bool ft = mode != DiffusionKind::lp;
  const Gradient g = averaged_clipped_gradient(m, ds, ft, cfg.clip_norm, rows);
  const double head_scale = mode == DiffusionKind::ft_layerwise ? std::sqrt(static_cast<double>(ds.d())) : 1.0;
  Vector v = m.v() - cfg.learning_rate * g.head;
  Matrix b = m.B();
  if (cfg.sigma_noise > 0.0) {
    if (noise_v.size() != m.k()) throw DimensionError("head noise has the wrong size");
    v.noalias() -= (cfg.learning_rate * cfg.sigma_noise * head_scale) * noise_v;
  }
  if (ft) {
    b -= cfg.learning_rate * g.features;
    if (cfg.sigma_noise > 0.0) {
      if (!noise_B || noise_B->rows() != m.k() || noise_B->cols() != m.d())
        throw DimensionError("feature noise has the wrong shape");
      b.noalias() -= (cfg.learning_rate * cfg.sigma_noise) * *noise_B;
    }
  }
  if (!v.allFinite() || !b.allFinite()) throw OptimizerError("DP-GD step produced a non-finite parameter");
  return TwoLayerModel(std::move(v), std::move(b));
}

struct DpTrajectory {
  std::vector<double> losses;  // steps + 1 entries, including the start
  TwoLayerModel final_model;
};

inline std::vector<std::size_t> draw_batch(std::size_t n, std::size_t size, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// lp_steps of linear probing, then the remaining steps in cfg.mode.
inline DpTrajectory run_schedule(const TwoLayerModel& model0, const Dataset& ds, const DpGdConfig& cfg,
                                 std::uint64_t seed) {
  cfg.validate();
  check_shapes(model0, ds);
  const std::size_t n = static_cast<std::size_t>(ds.n());
  if (cfg.batch_size > n) throw ParameterError("batch_size exceeds n");
  Rng noise = derive_rng(seed, {kStreamNoise});
  Rng batch = derive_rng(seed, {kStreamBatch});
  std::normal_distribution<double> gauss;
  Vector nv(model0.k());
  Matrix nb(model0.k(), model0.d());
  DpTrajectory tr{{}, model0};
  tr.losses.reserve(cfg.steps + 1);
  tr.losses.push_back(loss(model0, ds));
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const DiffusionKind mode = s < cfg.lp_steps ? DiffusionKind::lp : cfg.mode;
    if (cfg.sigma_noise > 0.0) {
      for (Eigen::Index i = 0; i < nv.size(); ++i) nv[i] = gauss(noise);
      if (mode != DiffusionKind::lp)
        for (Eigen::Index i = 0; i < nb.rows(); ++i)
          for (Eigen::Index j = 0; j < nb.cols(); ++j) nb(i, j) = gauss(noise);
    }
    if (cfg.batch_size > 0 && cfg.batch_size < n) {
      const auto rows = draw_batch(n, cfg.batch_size, batch);
      tr.final_model = dpgd_step(tr.final_model, ds, cfg, mode, nv, &nb, &rows);
    } else {
      tr.final_model = dpgd_step(tr.final_model, ds, cfg, mode, nv, &nb);
    }
    const double l = loss(tr.final_model, ds);
    if (!std::isfinite(l) || l > kDivergenceLoss)
      throw OptimizerError(fmt::format("DP-GD diverged at step {}", s + 1));
    tr.losses.push_back(l);
  }
  return tr;
}

struct DpEnsemble {
  std::vector<double> mean_loss, se_loss;
  std::size_t replicas = 0;
};

// Replica r starts from replica_initial_model(b0, init, r) and draws its
// noise from replica_seed(seed, r), mirroring the diffusion ensembles.
inline DpEnsemble dpgd_ensemble(const Dataset& ds, const Matrix& b0, const InitSpec& init, const DpGdConfig& cfg,
                                std::uint64_t seed, std::size_t replicas, unsigned threads = default_threads()) {
  if (replicas < 2) throw ParameterError("replicas must be >= 2");
  cfg.validate();
  const std::size_t blocks = std::min<std::size_t>(replicas, 64);
  std::vector<StatsBank> acc(blocks, StatsBank(cfg.steps + 1));
  parallel_blocks(
      blocks,
      [&](std::size_t blk) {
        const auto [lo, hi] = block_range(replicas, blocks, blk);
        for (std::size_t r = lo; r < hi; ++r) {
          const auto tr = run_schedule(replica_initial_model(b0, init, r), ds, cfg, replica_seed(seed, r));
          for (std::size_t s = 0; s < tr.losses.size(); ++s) acc[blk].add(s, tr.losses[s]);
        }
      },
      threads);
  StatsBank total(cfg.steps + 1);
  for (const auto& a : acc) total.merge(a);
  DpEnsemble out;
  out.replicas = replicas;
  for (std::size_t s = 0; s <= cfg.steps; ++s) {
    out.mean_loss.push_back(total[s].mean);
    out.se_loss.push_back(total[s].standard_error());
  }
  return out;
}

// DP-GD settings whose update matches an Euler-Maruyama step of size dt:
// the averaged gradient needs alpha = n dt, and the noise alpha sigma_noise = sqrt(2 sigma^2 dt).
inline DpGdConfig matched_config(const Dataset& ds, double sigma, double dt, std::size_t steps, DiffusionKind mode,
                                 std::size_t lp_steps = 0) {
  DpGdConfig cfg;
  cfg.learning_rate = static_cast<double>(ds.n()) * dt;
  cfg.sigma_noise = std::sqrt(2.0 * sigma * sigma * dt) / cfg.learning_rate;
  cfg.steps = steps;
  cfg.mode = mode;
  cfg.lp_steps = lp_steps;
  return cfg;
}

// Averaged clipped gradient sensitivity: 2C/n for replace-one, C/n for add/remove.
inline double noise_multiplier(const DpGdConfig& cfg, std::size_t n) {
  if (n == 0) throw ParameterError("n must be >= 1");
  const double sens = (cfg.adjacency == Adjacency::replace_one ? 2.0 : 1.0) * cfg.clip_norm / static_cast<double>(n);
  return std::isfinite(sens) ? cfg.sigma_noise / sens : 0.0;
}

inline constexpr std::size_t kAccountantGrid = 2000;
inline constexpr double kAccountantAlphaMax = 512.0;

// eps = min over alpha of T alpha / (2 rho^2) + ln(1/delta) / (alpha - 1) on a
// geometric grid of alpha - 1. The grid spans at least (1, 512] and widens to
// bracket the continuous minimizer 1 + rho sqrt(2 ln(1/delta) / T).
inline double accountant_epsilon(double rho, std::size_t steps, double delta) {
  if (!(rho > 0.0)) throw ParameterError("noise multiplier must be > 0 (epsilon is infinite)");
  if (steps < 1) throw ParameterError("steps must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw ParameterError("delta must be in (0, 1)");
  const double a = static_cast<double>(steps) / (2.0 * rho * rho);
  const double L = std::log(1.0 / delta);
  const double opt = std::sqrt(L / a);
  const double lo = std::min(1e-3, 0.25 * opt);
  const double hi = std::max(kAccountantAlphaMax - 1.0, 4.0 * opt);
  const double ratio = std::log(hi / lo) / static_cast<double>(kAccountantGrid - 1);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < kAccountantGrid; ++i) {
    const double am1 = lo * std::exp(ratio * static_cast<double>(i));
    best = std::min(best, a * (1.0 + am1) + L / am1);
  }
  return best;
}

struct PrivacyReport {
  double epsilon = 0.0;  // +inf without noise or clipping
  double delta = 1e-5;
  double noise_multiplier = 0.0;
  std::size_t steps = 0;
  Adjacency adjacency = Adjacency::replace_one;
};

inline PrivacyReport privacy_report(const DpGdConfig& cfg, std::size_t n, double delta) {
  PrivacyReport r;
  r.delta = delta;
  r.steps = cfg.steps;
  r.adjacency = cfg.adjacency;
  r.noise_multiplier = noise_multiplier(cfg, n);
  r.epsilon = (r.noise_multiplier > 0.0 && cfg.steps > 0) ? accountant_epsilon(r.noise_multiplier, cfg.steps, delta)
                                                          : std::numeric_limits<double>::infinity();
  if (cfg.steps == 0) r.epsilon = 0.0;
  return r;
}

inline nlohmann::json to_json(const PrivacyReport& r) {
  nlohmann::json j;
  j["epsilon"] = std::isfinite(r.epsilon) ? nlohmann::json(r.epsilon) : nlohmann::json(nullptr);
  j["delta"] = r.delta;
  j["noise_multiplier"] = r.noise_multiplier;
  j["steps"] = r.steps;
  j["adjacency"] = to_string(r.adjacency);
  return j;
}

}  // namespace dpft
