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

// Explicit Euler-Maruyama integrators for the Langevin diffusions of linear
// probing (head only), full fine-tuning with uniform noise, and full
// fine-tuning with the head noise variance scaled by d; plus an ensemble
// engine that estimates the expectations along a fixed time grid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dpft/core.hpp"
#include "dpft/params.hpp"
#include "dpft/parallel.hpp"
#include "dpft/rng.hpp"
#include "dpft/stats.hpp"

namespace dpft {

enum class DiffusionKind { lp, ft_uniform, ft_layerwise };

inline std::string_view to_string(DiffusionKind k) {
  switch (k) {
    case DiffusionKind::lp: return "lp";
    case DiffusionKind::ft_uniform: return "ft_uniform";
    case DiffusionKind::ft_layerwise: return "ft_layerwise";
  }
  return "?";
}

inline DiffusionKind diffusion_kind_from_string(std::string_view s) {
  if (s == "lp" || s == "LP") return DiffusionKind::lp;
  if (s == "ft_uniform" || s == "FT_UNIFORM" || s == "ft") return DiffusionKind::ft_uniform;
  if (s == "ft_layerwise" || s == "FT_LAYERWISE" || s == "layerwise") return DiffusionKind::ft_layerwise;
  throw ParameterError(fmt::format("unknown diffusion kind '{}'", s));
}

inline constexpr double kDivergenceLoss = 1e12;

struct DiffusionSpec {
  DiffusionKind kind = DiffusionKind::lp;
  double sigma = 0.0;
  double dt = 1e-3;
  double horizon = 1.0;
  std::uint64_t seed = 0;
  double max_dt = 0.01;  // explicit-scheme stability guard

  void validate() const {
    if (sigma < 0.0 || !std::isfinite(sigma)) throw ParameterError("sigma must be finite and >= 0");
    if (!(dt > 0.0)) throw ParameterError("dt must be > 0");
    if (dt > max_dt) throw ParameterError(fmt::format("dt={} exceeds max_dt={}", dt, max_dt));
    if (!(horizon >= 0.0) || !std::isfinite(horizon)) throw ParameterError("horizon must be finite and >= 0");
    if (horizon > 0.0 && dt > horizon) throw ParameterError("dt must not exceed the horizon");
  }
};

// Number of integration steps covering `duration`; the last one is shortened
// so the grid ends exactly on the duration.
inline std::size_t step_count(double duration, double dt) {
  if (duration <= 0.0) return 0;
  return static_cast<std::size_t>(std::ceil(duration / dt - 1e-9));
}

// One explicit Euler-Maruyama update working on caller-owned state. Drifts
// only need X^T X and X^T Y; both are evaluated at the pre-step state.
class LangevinKernel {
 public:
  explicit LangevinKernel(const Dataset& ds)
      : gram_(ds.gram()), xty_(ds.xty()), yy_(ds.label_norm2()), d_(ds.d()) {}

  Eigen::Index d() const { return d_; }

  // 1/2 (w^T G w - 2 w^T h + Y^T Y) with w = B^T v.
  double loss(const Vector& v, const Matrix& b) {
    w_.noalias() = b.transpose() * v;
    gw_.noalias() = gram_ * w_;
    return std::max(0.0, 0.5 * (w_.dot(gw_) - 2.0 * w_.dot(xty_) + yy_));
  }

  // Head noise standard-deviation multiplier (sqrt(d) in the layerwise kind).
  double head_noise_scale(DiffusionKind kind) const {
    return kind == DiffusionKind::ft_layerwise ? std::sqrt(static_cast<double>(d_)) : 1.0;
  }

  void step(DiffusionKind kind, double sigma, double dt, Vector& v, Matrix& b, const Vector& noise_v,
            const Matrix* noise_b) {
    w_.noalias() = b.transpose() * v;
    r_.noalias() = gram_ * w_;
    r_ -= xty_;  // X^T (X B^T v - Y)
    gv_.noalias() = b * r_;
    const double amp = std::sqrt(2.0 * sigma * sigma * dt);
    if (kind == DiffusionKind::lp) {
      v -= dt * gv_;
      if (amp > 0.0) v += amp * noise_v;
      return;
    }
    const double amp_v = amp * head_noise_scale(kind);
    // B update uses the pre-step head.
    b.noalias() -= (dt * v) * r_.transpose();
    v -= dt * gv_;
    if (amp > 0.0) {
      v += amp_v * noise_v;
      b += amp * (*noise_b);
    }
  }

 private:
  Matrix gram_;
  Vector xty_;
  double yy_;
  Eigen::Index d_;
  Vector w_, gw_, r_, gv_;
};

// v <- v - B0 X^T (X B0^T v - Y) dt + sqrt(2 sigma^2 dt) noise, B unchanged.
inline TwoLayerModel step_lp(const TwoLayerModel& m, const Dataset& ds, double sigma, double dt,
                             const Vector& noise) {
  check_shapes(m, ds);
  if (noise.size() != m.k()) throw DimensionError("noise must have length k");
  LangevinKernel kernel(ds);
  Vector v = m.v();
  Matrix b = m.B();
  kernel.step(DiffusionKind::lp, sigma, dt, v, b, noise, nullptr);
  if (!v.allFinite()) throw IntegratorError("non-finite head after LP step", dt);
  return TwoLayerModel(std::move(v), std::move(b));
}

// Both layers move; layerwise=true multiplies the head noise variance by d.
inline TwoLayerModel step_ft(const TwoLayerModel& m, const Dataset& ds, double sigma, double dt,
                             const Vector& noise_v, const Matrix& noise_b, bool layerwise) {
  check_shapes(m, ds);
  if (noise_v.size() != m.k() || noise_b.rows() != m.k() || noise_b.cols() != m.d())
    throw DimensionError("noise shapes must match (k) and (k x d)");
  LangevinKernel kernel(ds);
  Vector v = m.v();
  Matrix b = m.B();
  kernel.step(layerwise ? DiffusionKind::ft_layerwise : DiffusionKind::ft_uniform, sigma, dt, v, b, noise_v, &noise_b);
  if (!v.allFinite() || !b.allFinite()) throw IntegratorError("non-finite state after FT step", dt);
  return TwoLayerModel(std::move(v), std::move(b));
}

// Deterministic (Ito) drift of the loss along the diffusion:
//   -||grad_v||^2 [- ||grad_B||^2] + sigma^2 s tr(B G B^T) [+ sigma^2 ||v||^2 tr(G)]
// where G = X^T X and s is the head variance multiplier (d when layerwise).
inline double loss_drift(DiffusionKind kind, double sigma, const TwoLayerModel& m, const Dataset& ds) {
  check_shapes(m, ds);
  const Vector r = ds.gram() * (m.B().transpose() * m.v()) - ds.xty();
  const Vector gv = m.B() * r;
  const double s2 = sigma * sigma;
  const double curv_v = (m.B() * ds.gram() * m.B().transpose()).trace();
  if (kind == DiffusionKind::lp) return -gv.squaredNorm() + s2 * curv_v;
  const double head_mult = kind == DiffusionKind::ft_layerwise ? static_cast<double>(ds.d()) : 1.0;
  const double grad_b2 = m.v().squaredNorm() * r.squaredNorm();
  return -gv.squaredNorm() - grad_b2 + s2 * head_mult * curv_v + s2 * m.v().squaredNorm() * ds.gram().trace();
}

struct Phase {
  DiffusionKind kind;
  double duration;
};

struct Snapshot {
  double time;
  TwoLayerModel model;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<double> losses;
  std::vector<Snapshot> states;  // thinned to at most kMaxSnapshots

  static constexpr std::size_t kMaxSnapshots = 1000;
};

// Called on every grid point (index, time, v, B, loss) including t = 0.
using PathObserver = std::function<void(std::size_t, double, const Vector&, const Matrix&, double)>;

namespace detail {

inline void fill_normal(Vector& out, Rng& rng, std::normal_distribution<double>& normal) {
  for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = normal(rng);
}

inline void fill_normal(Matrix& out, Rng& rng, std::normal_distribution<double>& normal) {
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = normal(rng);
}

inline std::size_t total_steps(const std::vector<Phase>& phases, double dt) {
  std::size_t n = 0;
  for (const auto& p : phases) n += step_count(p.duration, dt);
  return n;
}

// Integrates (v, B) in place through consecutive phases on one noise stream.
// Calls obs(index, t, v, B, loss) on every grid point for which
// record(index) is true. Throws DivergenceError on blow-up.
template <class Record, class Obs>
void integrate(LangevinKernel& kernel, Vector& v, Matrix& b, const std::vector<Phase>& phases, double sigma,
               double dt, Rng& rng, Record&& record, Obs&& obs) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector noise_v(v.size());
  Matrix noise_b(b.rows(), b.cols());
  std::size_t index = 0;
  double t = 0.0;
  double current = kernel.loss(v, b);
  if (record(index)) obs(index, t, v, b, current);
  for (const auto& phase : phases) {
    const std::size_t steps = step_count(phase.duration, dt);
    const double start = t;
    for (std::size_t s = 0; s < steps; ++s) {
      const double h = s + 1 == steps ? phase.duration - dt * static_cast<double>(s) : dt;
      if (sigma > 0.0) {
        fill_normal(noise_v, rng, normal);
        if (phase.kind != DiffusionKind::lp) fill_normal(noise_b, rng, normal);
      }
      kernel.step(phase.kind, sigma, h, v, b, noise_v, &noise_b);
      t = s + 1 == steps ? start + phase.duration : start + dt * static_cast<double>(s + 1);
      ++index;
      current = kernel.loss(v, b);
      if (!std::isfinite(current) || current > kDivergenceLoss || !v.allFinite() || !b.allFinite())
        throw DivergenceError(t);
      if (record(index)) obs(index, t, v, b, current);
    }
  }
}

}  // namespace detail

// Steps through a schedule of phases on one noise stream seeded by `seed`.
// Zero-length phases draw no noise, so a schedule [LP T, FT 0] reproduces
// the pure-LP path exactly.
inline Trajectory simulate_phases(const TwoLayerModel& model0, const Dataset& ds, const std::vector<Phase>& phases,
                                  double sigma, double dt, std::uint64_t seed, const PathObserver& observer = {}) {
  check_shapes(model0, ds);
  for (const auto& p : phases) {
    DiffusionSpec probe{p.kind, sigma, dt, p.duration, seed};
    probe.validate();
  }
  LangevinKernel kernel(ds);
  Rng rng = derive_rng(seed, {kStreamNoise});
  Vector v = model0.v();
  Matrix b = model0.B();
  const std::size_t n = detail::total_steps(phases, dt);
  const std::size_t stride = std::max<std::size_t>(1, (n + Trajectory::kMaxSnapshots) / Trajectory::kMaxSnapshots);
  Trajectory traj;
  traj.times.reserve(n + 1);
  traj.losses.reserve(n + 1);
  detail::integrate(kernel, v, b, phases, sigma, dt, rng, [](std::size_t) { return true; },
                    [&](std::size_t i, double t, const Vector& vv, const Matrix& bb, double l) {
                      traj.times.push_back(t);
                      traj.losses.push_back(l);
                      if (i % stride == 0 && traj.states.size() < Trajectory::kMaxSnapshots)
                        traj.states.push_back({t, TwoLayerModel(vv, bb)});
                      if (observer) observer(i, t, vv, bb, l);
                    });
  return traj;
}

// Single-kind path on the integration grid; deterministic in spec.seed.
inline Trajectory simulate(const TwoLayerModel& model0, const Dataset& ds, const DiffusionSpec& spec,
                           const PathObserver& observer = {}) {
  spec.validate();
  return simulate_phases(model0, ds, {{spec.kind, spec.horizon}}, spec.sigma, spec.dt, spec.seed, observer);
}

// Per-replica seed: a splitmix64 mix of (seed, replica), so replica r of an
// ensemble is reproducible as a standalone simulate() call.
inline std::uint64_t replica_seed(std::uint64_t seed, std::uint64_t replica) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (replica + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Fresh head per replica (Gaussian draw), shared features.
inline TwoLayerModel replica_initial_model(const Matrix& b0, const InitSpec& init, std::uint64_t replica) {
  InitSpec spec = init;
  spec.seed = replica_seed(init.seed, replica);
  return TwoLayerModel(init_head(b0.rows(), spec), b0);
}

// Slope statistics of one time window, estimated replica by replica (OLS
// slope of each path over the window grid points), so the standard errors
// account for the time correlation along each path.
struct WindowSlopes {
  double t0 = 0.0, t1 = 0.0;
  std::size_t i0 = 0, i1 = 0;   // recorded-grid indices
  Matrix imbalance_slope;       // mean slope of each D entry
  Matrix imbalance_se;
  Vector eigen_slope;           // sorted eigenvalues, when tracked
  Vector eigen_se;
  double trace_slope = 0.0, trace_se = 0.0;  // slope of tr(D)
  double loss_slope = 0.0, loss_se = 0.0;
  std::size_t near_crossings = 0;  // replicas whose eigen gap fell below 1e-6 in the window
};

struct EnsembleOptions {
  std::size_t record_stride = 0;  // 0: choose so that at most ~1000 grid points are kept
  bool track_eigenvalues = false;
  std::vector<std::pair<double, double>> windows;
  unsigned threads = default_threads();
};

struct EnsembleStats {
  DiffusionKind kind = DiffusionKind::lp;
  double sigma = 0.0;
  double dt = 0.0;
  Eigen::Index k = 0, d = 0;
  std::size_t replicas = 0;
  std::vector<double> times;
  std::vector<double> mean_loss, var_loss;
  std::vector<double> mean_vnorm2, var_vnorm2;
  std::vector<Matrix> mean_imbalance, var_imbalance;
  std::vector<Vector> mean_eigenvalues;  // empty unless tracked
  std::vector<WindowSlopes> windows;

  double se_loss(std::size_t i) const { return std::sqrt(var_loss[i] / static_cast<double>(replicas)); }
  double se_vnorm2(std::size_t i) const { return std::sqrt(var_vnorm2[i] / static_cast<double>(replicas)); }

  // Index of the recorded grid point at time t (within 1e-9), if any.
  std::optional<std::size_t> grid_index(double t) const {
    const double tol = 1e-9 * std::max(1.0, std::abs(t));
    auto it = std::lower_bound(times.begin(), times.end(), t - tol);
    if (it != times.end() && std::abs(*it - t) <= tol) return static_cast<std::size_t>(it - times.begin());
    return std::nullopt;
  }
};

namespace detail {

inline std::vector<std::size_t> recorded_indices(std::size_t steps, std::size_t stride) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i <= steps; i += stride) idx.push_back(i);
  if (idx.back() != steps) idx.push_back(steps);
  return idx;
}

inline double grid_time(const std::vector<Phase>& phases, double dt, std::size_t index) {
  double t = 0.0;
  for (const auto& p : phases) {
    const std::size_t n = step_count(p.duration, dt);
    if (index <= n) return index == n ? t + p.duration : t + dt * static_cast<double>(index);
    index -= n;
    t += p.duration;
  }
  return t;
}

}  // namespace detail

// Independent replicas: v0 redrawn per replica, B0 shared, noise stream per
// replica. Accumulation is blocked by replica index and merged in block
// order, so the output does not depend on the thread schedule.
inline EnsembleStats simulate_ensemble(const Dataset& ds, const Matrix& b0, const InitSpec& init,
                                       const DiffusionSpec& spec, std::size_t replicas,
                                       const EnsembleOptions& options = {}) {
  spec.validate();
  if (replicas < 1) throw ParameterError("replicas must be >= 1");
  if (b0.cols() != ds.d()) throw DimensionError("B0 column count must equal d");
  const Eigen::Index k = b0.rows(), d = ds.d();
  const std::size_t steps = step_count(spec.horizon, spec.dt);
  const std::size_t stride =
      options.record_stride > 0 ? options.record_stride : std::max<std::size_t>(1, (steps + 999) / 1000);
  const std::vector<Phase> phases{{spec.kind, spec.horizon}};
  const auto rec = detail::recorded_indices(steps, stride);
  const std::size_t T = rec.size();
  std::vector<double> times(T);
  for (std::size_t i = 0; i < T; ++i) times[i] = detail::grid_time(phases, spec.dt, rec[i]);

  // Map raw step index -> recorded slot.
  std::vector<long> slot(steps + 1, -1);
  for (std::size_t i = 0; i < T; ++i) slot[rec[i]] = static_cast<long>(i);

  // Window weights for per-path OLS slopes.
  struct WindowPlan {
    std::size_t i0, i1;
    std::vector<double> weight;  // indexed by recorded slot in [i0, i1]
  };
  std::vector<WindowPlan> plans;
  EnsembleStats out;
  out.times = times;
  for (const auto& [t0, t1] : options.windows) {
    auto a = out.grid_index(t0), bidx = out.grid_index(t1);
    if (!a || !bidx) throw ParameterError(fmt::format("window [{}, {}] is not on the recorded grid", t0, t1));
    if (*bidx <= *a) throw ParameterError("window needs t1 > t0");
    WindowPlan plan{*a, *bidx, {}};
    double mean_t = 0.0;
    for (std::size_t i = *a; i <= *bidx; ++i) mean_t += times[i];
    mean_t /= static_cast<double>(*bidx - *a + 1);
    double sxx = 0.0;
    for (std::size_t i = *a; i <= *bidx; ++i) sxx += (times[i] - mean_t) * (times[i] - mean_t);
    for (std::size_t i = *a; i <= *bidx; ++i) plan.weight.push_back((times[i] - mean_t) / sxx);
    plans.push_back(std::move(plan));
  }

  const std::size_t kk = static_cast<std::size_t>(k * k);
  const std::size_t W = plans.size();
  const bool eig = options.track_eigenvalues;
  struct Block {
    StatsBank loss, vnorm, imb, eigs, wimb, weig, wloss, wtrace;
    std::vector<std::size_t> crossings;
  };
  const std::size_t blocks = std::min<std::size_t>(replicas, 64);
  std::vector<Block> acc(blocks);

  parallel_blocks(
      blocks,
      [&](std::size_t blk) {
        Block& B = acc[blk];
        B.loss = StatsBank(T);
        B.vnorm = StatsBank(T);
        B.imb = StatsBank(T * kk);
        B.eigs = StatsBank(eig ? T * static_cast<std::size_t>(k) : 0);
        B.wimb = StatsBank(W * kk);
        B.weig = StatsBank(eig ? W * static_cast<std::size_t>(k) : 0);
        B.wloss = StatsBank(W);
        B.wtrace = StatsBank(W);
        B.crossings.assign(W, 0);
        LangevinKernel kernel(ds);
        Matrix dmat(k, k);
        Eigen::SelfAdjointEigenSolver<Matrix> solver(k);
        std::vector<double> slope_imb(W * kk), slope_eig(eig ? W * static_cast<std::size_t>(k) : 0), slope_loss(W);
        std::vector<char> crossed(W);
        const auto [lo, hi] = block_range(replicas, blocks, blk);
        for (std::size_t r = lo; r < hi; ++r) {
          TwoLayerModel m0 = replica_initial_model(b0, init, r);
          Vector v = m0.v();
          Matrix b = m0.B();
          Rng rng = derive_rng(replica_seed(spec.seed, r), {kStreamNoise});
          std::fill(slope_imb.begin(), slope_imb.end(), 0.0);
          std::fill(slope_eig.begin(), slope_eig.end(), 0.0);
          std::fill(slope_loss.begin(), slope_loss.end(), 0.0);
          std::fill(crossed.begin(), crossed.end(), 0);
          try {
            detail::integrate(
                kernel, v, b, phases, spec.sigma, spec.dt, rng, [&](std::size_t i) { return slot[i] >= 0; },
                [&](std::size_t i, double, const Vector& vv, const Matrix& bb, double l) {
                  const std::size_t s = static_cast<std::size_t>(slot[i]);
                  B.loss.add(s, l);
                  B.vnorm.add(s, vv.squaredNorm());
                  dmat.noalias() = vv * vv.transpose();
                  dmat.noalias() -= bb * bb.transpose();
                  for (Eigen::Index a = 0; a < k; ++a)
                    for (Eigen::Index c = 0; c < k; ++c) B.imb.add(s * kk + static_cast<std::size_t>(a * k + c), dmat(a, c));
                  Vector lam;
                  if (eig) {
                    solver.compute(0.5 * (dmat + dmat.transpose()), Eigen::EigenvaluesOnly);
                    lam = solver.eigenvalues();
                    for (Eigen::Index a = 0; a < k; ++a) B.eigs.add(s * static_cast<std::size_t>(k) + static_cast<std::size_t>(a), lam[a]);
                  }
                  for (std::size_t w = 0; w < W; ++w) {
                    const auto& p = plans[w];
                    if (s < p.i0 || s > p.i1) continue;
                    const double wt = p.weight[s - p.i0];
                    for (std::size_t e = 0; e < kk; ++e) slope_imb[w * kk + e] += wt * dmat(static_cast<Eigen::Index>(e / static_cast<std::size_t>(k)), static_cast<Eigen::Index>(e % static_cast<std::size_t>(k)));
                    slope_loss[w] += wt * l;
                    if (eig) {
                      for (Eigen::Index a = 0; a < k; ++a) slope_eig[w * static_cast<std::size_t>(k) + static_cast<std::size_t>(a)] += wt * lam[a];
                      for (Eigen::Index a = 0; a + 1 < k; ++a)
                        if (lam[a + 1] - lam[a] < 1e-6) crossed[w] = 1;
                    }
                  }
                });
          } catch (const DivergenceError& e) {
            throw DivergenceError(e.time(), static_cast<long>(r));
          }
          for (std::size_t w = 0; w < W; ++w) {
            for (std::size_t e = 0; e < kk; ++e) B.wimb.add(w * kk + e, slope_imb[w * kk + e]);
            if (eig)
              for (Eigen::Index a = 0; a < k; ++a) {
                const std::size_t ix = w * static_cast<std::size_t>(k) + static_cast<std::size_t>(a);
                B.weig.add(ix, slope_eig[ix]);
              }
            B.wloss.add(w, slope_loss[w]);
            double tr = 0.0;
            for (Eigen::Index a = 0; a < k; ++a) tr += slope_imb[w * kk + static_cast<std::size_t>(a * k + a)];
            B.wtrace.add(w, tr);
            B.crossings[w] += crossed[w];
          }
        }
      },
      options.threads);

  Block total = std::move(acc[0]);
  for (std::size_t blk = 1; blk < blocks; ++blk) {
    total.loss.merge(acc[blk].loss);
    total.vnorm.merge(acc[blk].vnorm);
    total.imb.merge(acc[blk].imb);
    total.eigs.merge(acc[blk].eigs);
    total.wimb.merge(acc[blk].wimb);
    total.weig.merge(acc[blk].weig);
    total.wloss.merge(acc[blk].wloss);
    total.wtrace.merge(acc[blk].wtrace);
    for (std::size_t w = 0; w < W; ++w) total.crossings[w] += acc[blk].crossings[w];
  }

  out.kind = spec.kind;
  out.sigma = spec.sigma;
  out.dt = spec.dt;
  out.k = k;
  out.d = d;
  out.replicas = replicas;
  out.mean_loss.resize(T);
  out.var_loss.resize(T);
  out.mean_vnorm2.resize(T);
  out.var_vnorm2.resize(T);
  out.mean_imbalance.assign(T, Matrix(k, k));
  out.var_imbalance.assign(T, Matrix(k, k));
  if (eig) out.mean_eigenvalues.assign(T, Vector(k));
  for (std::size_t i = 0; i < T; ++i) {
    out.mean_loss[i] = total.loss[i].mean;
    out.var_loss[i] = total.loss[i].variance();
    out.mean_vnorm2[i] = total.vnorm[i].mean;
    out.var_vnorm2[i] = total.vnorm[i].variance();
    for (Eigen::Index a = 0; a < k; ++a)
      for (Eigen::Index c = 0; c < k; ++c) {
        const auto& cell = total.imb[i * kk + static_cast<std::size_t>(a * k + c)];
        out.mean_imbalance[i](a, c) = cell.mean;
        out.var_imbalance[i](a, c) = cell.variance();
      }
    if (eig)
      for (Eigen::Index a = 0; a < k; ++a) out.mean_eigenvalues[i][a] = total.eigs[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(a)].mean;
  }
  for (std::size_t w = 0; w < W; ++w) {
    WindowSlopes ws;
    ws.i0 = plans[w].i0;
    ws.i1 = plans[w].i1;
    ws.t0 = times[ws.i0];
    ws.t1 = times[ws.i1];
    ws.imbalance_slope.resize(k, k);
    ws.imbalance_se.resize(k, k);
    for (Eigen::Index a = 0; a < k; ++a)
      for (Eigen::Index c = 0; c < k; ++c) {
        const auto& cell = total.wimb[w * kk + static_cast<std::size_t>(a * k + c)];
        ws.imbalance_slope(a, c) = cell.mean;
        ws.imbalance_se(a, c) = cell.standard_error();
      }
    if (eig) {
      ws.eigen_slope.resize(k);
      ws.eigen_se.resize(k);
      for (Eigen::Index a = 0; a < k; ++a) {
        const auto& cell = total.weig[w * static_cast<std::size_t>(k) + static_cast<std::size_t>(a)];
        ws.eigen_slope[a] = cell.mean;
        ws.eigen_se[a] = cell.standard_error();
      }
    }
    ws.trace_slope = total.wtrace[w].mean;
    ws.trace_se = total.wtrace[w].standard_error();
    ws.loss_slope = total.wloss[w].mean;
    ws.loss_se = total.wloss[w].standard_error();
    ws.near_crossings = total.crossings[w];
    out.windows.push_back(std::move(ws));
  }
  return out;
}

// Final-loss statistics of a phase schedule over replicas (used by sweeps).
inline RunningStats ensemble_final_loss(const Dataset& ds, const Matrix& b0, const InitSpec& init,
                                        const std::vector<Phase>& phases, double sigma, double dt,
                                        std::uint64_t seed, std::size_t replicas,
                                        unsigned threads = default_threads()) {
  if (replicas < 1) throw ParameterError("replicas must be >= 1");
  for (const auto& p : phases) {
    DiffusionSpec probe{p.kind, sigma, dt, p.duration, seed};
    probe.validate();
  }
  const std::size_t blocks = std::min<std::size_t>(replicas, 64);
  std::vector<RunningStats> acc(blocks);
  parallel_blocks(
      blocks,
      [&](std::size_t blk) {
        LangevinKernel kernel(ds);
        const auto [lo, hi] = block_range(replicas, blocks, blk);
        for (std::size_t r = lo; r < hi; ++r) {
          TwoLayerModel m0 = replica_initial_model(b0, init, r);
          Vector v = m0.v();
          Matrix b = m0.B();
          Rng rng = derive_rng(replica_seed(seed, r), {kStreamNoise});
          double final_loss = 0.0;
          try {
            detail::integrate(kernel, v, b, phases, sigma, dt, rng, [](std::size_t) { return true; },
                              [&](std::size_t, double, const Vector&, const Matrix&, double l) { final_loss = l; });
          } catch (const DivergenceError& e) {
            throw DivergenceError(e.time(), static_cast<long>(r));
          }
          acc[blk].add(final_loss);
        }
      },
      threads);
  RunningStats total;
  for (const auto& a : acc) total.merge(a);
  return total;
}

// E||v(t)||^2 along linear probing from v0 ~ N(0, beta I) with orthonormal B0:
//   k beta e^{-2t} + 2 a (e^{-t} - e^{-2t}) + (a + k sigma^2)(1 - e^{-2t}),  a = ||B0 X^T Y||^2.
inline double lp_vnorm_closed_form(double t, const BoundParams& p) {
  if (t < 0.0) throw ParameterError("time must be >= 0");
  const double a = p.head_signal();
  const double e1 = std::exp(-t), e2 = std::exp(-2.0 * t);
  return static_cast<double>(p.k) * p.beta * e2 + 2.0 * a * (e1 - e2) +
         (a + static_cast<double>(p.k) * p.sigma2()) * (1.0 - e2);
}

// Exact E||v(t)||^2 along linear probing: the mean of v is a (1 - e^{-t})
// along B0 X^T Y and each coordinate has variance beta e^{-2t} + sigma^2 (1 - e^{-2t}).
inline double lp_vnorm_expectation(double t, const BoundParams& p) {
  if (t < 0.0) throw ParameterError("time must be >= 0");
  const double a = p.head_signal();
  const double e1 = std::exp(-t), e2 = std::exp(-2.0 * t);
  const double k = static_cast<double>(p.k);
  return a * (1.0 - e1) * (1.0 - e1) + k * p.beta * e2 + k * p.sigma2() * (1.0 - e2);
}

// Exact E[L(t)] along linear probing: gamma/2 + (k beta + a) e^{-2t}/2 + k sigma^2 (1 - e^{-2t})/2.
inline double lp_loss_expectation(double t, const BoundParams& p) {
  if (t < 0.0) throw ParameterError("time must be >= 0");
  const double e2 = std::exp(-2.0 * t), k = static_cast<double>(p.k);
  return 0.5 * p.gamma + 0.5 * (k * p.beta + p.head_signal()) * e2 + 0.5 * k * p.sigma2() * (1.0 - e2);
}

// CSV: time, mean_loss, var_loss, mean_vnorm2, then D entries row-major.
inline std::string ensemble_to_csv(const EnsembleStats& s) {
  std::string out = "time,mean_loss,var_loss,mean_vnorm2";
  for (Eigen::Index a = 0; a < s.k; ++a)
    for (Eigen::Index c = 0; c < s.k; ++c) out += fmt::format(",D_{}_{}", a, c);
  out += '\n';
  for (std::size_t i = 0; i < s.times.size(); ++i) {
    out += fmt::format("{:.10g},{:.17g},{:.17g},{:.17g}", s.times[i], s.mean_loss[i], s.var_loss[i], s.mean_vnorm2[i]);
    for (Eigen::Index a = 0; a < s.k; ++a)
      for (Eigen::Index c = 0; c < s.k; ++c) out += fmt::format(",{:.17g}", s.mean_imbalance[i](a, c));
    out += '\n';
  }
  return out;
}

}  // namespace dpft
