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

// Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned
// below. Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>

#include <fmt/core.h>

#include "dpft/harness.hpp"

namespace {

using namespace dpft;
namespace fs = std::filesystem;

constexpr double kSigmas = 3.0;                // statistical threshold (standard errors)
constexpr double kWinnerMargin = 1.0;          // winner margin (combined standard errors)
constexpr double kOracleTol = 1e-8;            // loss and gamma oracle agreement
constexpr double kFtFloor = 1e-4;              // noiseless fine-tuning at t = 50
constexpr double kLpLimitTol = 1e-6;           // noiseless probing limit
constexpr std::size_t kInvariantReplicas = 10000;
constexpr std::size_t kSweepReplicas = 1000;
constexpr std::size_t kSensitivityPairs = 100000;
constexpr std::uint64_t kSeed = 2024;
constexpr std::uint64_t kParameterSetSeed = 99;

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void report(int id, const char* title, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o{false, ""};
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, fmt::format("exception: {}", e.what())};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  fmt::print("criterion {:>2} {} [{:.1f}s] {}: {}\n", id, o.pass ? "PASS" : "FAIL", secs, title, o.detail);
  std::fflush(stdout);
}

void info(const std::string& line) {
  fmt::print("  info: {}\n", line);
  std::fflush(stdout);
}

struct Canonical {
  ExperimentConfig cfg;
  Instance inst = make_instance(cfg);
};

EnsembleStats drift_run(const Canonical& c, DiffusionKind kind) {
  return simulate_ensemble(c.inst.dataset, c.inst.b0, c.inst.init, {kind, 0.1, 1e-3, 1.0, kSeed}, kInvariantReplicas,
                           {0, false, {{0.0, 1.0}}, default_threads()});
}

// Max |slope - target| / SE over the entries, split by diagonal.
std::pair<double, double> drift_z(const DriftEstimate& est, double diag_target) {
  double zd = 0.0, zo = 0.0;
  for (Eigen::Index i = 0; i < est.slope.rows(); ++i)
    for (Eigen::Index j = 0; j < est.slope.cols(); ++j) {
      const double t = i == j ? diag_target : 0.0;
      const double z = std::abs(est.slope(i, j) - t) / est.se(i, j);
      (i == j ? zd : zo) = std::max(i == j ? zd : zo, z);
    }
  return {zd, zo};
}

Outcome criterion1(const Canonical& c) {
  const auto est = estimate_imbalance_drift(drift_run(c, DiffusionKind::ft_uniform), {0.0, 1.0});
  const double stated = (1.0 - 4.0) * 0.01;
  const auto [zd, zo] = drift_z(est, stated);
  const auto [zc, zco] = drift_z(est, expected_imbalance_drift(DiffusionKind::ft_uniform, 0.1, 3, 4)(0, 0));
  info(fmt::format("diagonal slopes {:.5f} {:.5f} {:.5f} (SE {:.5f})", est.slope(0, 0), est.slope(1, 1), est.slope(2, 2),
                   est.se(0, 0)));
  info(fmt::format("against the Ito rate 2(1-d)sigma^2 = -0.06: max diagonal z = {:.2f}, off-diagonal z = {:.2f}", zc, zco));
  return {zd <= kSigmas && zo <= kSigmas,
          fmt::format("target {:.3f}: max diagonal z = {:.2f}, max off-diagonal z = {:.2f}", stated, zd, zo)};
}

Outcome criterion2(const Canonical& c) {
  const auto est = estimate_imbalance_drift(drift_run(c, DiffusionKind::ft_layerwise), {0.0, 1.0});
  const auto [zd, zo] = drift_z(est, 0.0);
  return {std::max(zd, zo) <= kSigmas, fmt::format("all 9 slopes vs 0: max z = {:.2f}", std::max(zd, zo))};
}

Outcome criterion3(const Canonical& c) {
  const double sigma = 0.1, T = 2.0;
  const auto stats = simulate_ensemble(c.inst.dataset, c.inst.b0, c.inst.init, {DiffusionKind::lp, sigma, 1e-3, T, kSeed},
                                       kInvariantReplicas, {100, false, {}, default_threads()});
  const auto p = c.inst.params(sigma);
  double worst = 0.0, worst_exact = 0.0;
  std::size_t checked = 0;
  for (std::size_t i = 1; i < stats.times.size(); ++i) {
    const double se = stats.se_vnorm2(i);
    worst = std::max(worst, std::abs(stats.mean_vnorm2[i] - lp_vnorm_closed_form(stats.times[i], p)) / se);
    worst_exact = std::max(worst_exact, std::abs(stats.mean_vnorm2[i] - lp_vnorm_expectation(stats.times[i], p)) / se);
    ++checked;
  }
  info(fmt::format("against the exact second moment a(1-e^-t)^2 + k beta e^-2t + k sigma^2 (1-e^-2t): max z = {:.2f}",
                   worst_exact));
  return {checked == 20 && worst <= kSigmas, fmt::format("{} grid times, max z = {:.2f}", checked, worst)};
}

// Random instances passing the scale condition (and c > 0 for the fine-tuning bound).
std::vector<std::pair<Instance, double>> random_parameter_sets() {
  Rng rng = derive_rng(kParameterSetSeed, {kStreamModel});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::vector<std::pair<Instance, double>> out;
  while (out.size() < 10) {
    const int d = uniform_int(2, 6), n = uniform_int(d, 2 * d), k = uniform_int(1, d);
    const std::uint64_t seed = rng();
    Dataset ds = make_dataset(n, d, seed, true, LabelModel::realizable);
    const auto [lo, hi] = achievable_gamma_range(ds, k);
    const double g = lo + (hi - lo) * (0.1 + 0.8 * u(rng));
    Matrix b0 = make_pretrained_features(ds, k, g, seed);
    auto p = BoundParams::from_instance(ds, b0, 1.0, 0.0);
    p.beta = check_scale_condition(p).beta_floor * (1.1 + 1.4 * u(rng));
    p.sigma = std::sqrt(check_scale_condition(p).sigma_ceiling * (0.1 + 0.8 * u(rng)));
    const auto a2 = check_scale_condition(p);
    if (!a2.ok || !(static_cast<double>(k) * p.beta - 1.0 - std::numbers::sqrt2 * p.sigma2() * (1.0 + d) > 0.0)) continue;
    out.push_back({Instance{std::move(ds), std::move(b0), {p.beta, seed, true}}, p.sigma});
  }
  return out;
}

Outcome envelope(DiffusionKind kind) {
  std::size_t violations = 0, points = 0, bad_sets = 0;
  std::string worst;
  for (const auto& [inst, sigma] : random_parameter_sets()) {
    ExperimentConfig cfg;
    cfg.sigma = sigma;
    cfg.horizon = 5.0;
    cfg.dt = 1e-2;
    cfg.replicas = kInvariantReplicas;
    cfg.seed = kSeed;
    const auto rep = bound_report(cfg, inst, kind);
    if (!rep.applicable) return {false, fmt::format("generated set not applicable: {}", rep.reason)};
    violations += rep.violations;
    points += rep.times.size();
    if (rep.violations > 0) {
      ++bad_sets;
      info(fmt::format("set d={} k={} beta={:.4g} sigma={:.4g}: {} of {} points above bound + 3 SE", inst.dataset.d(),
                       inst.b0.rows(), inst.init.beta, sigma, rep.violations, rep.times.size()));
    }
  }
  return {violations == 0, fmt::format("{} violations over {} grid points in {} of 10 sets", violations, points, bad_sets)};
}

Outcome criterion6(const Canonical& c) {
  const auto m0 = replica_initial_model(c.inst.b0, c.inst.init, 0);
  const auto ft = simulate(m0, c.inst.dataset, {DiffusionKind::ft_uniform, 0.0, 1e-2, 50.0, kSeed});
  const auto lp = simulate(m0, c.inst.dataset, {DiffusionKind::lp, 0.0, 1e-2, 50.0, kSeed});
  const double floor = min_head_loss(c.inst.b0, c.inst.dataset);
  info(fmt::format("min_u L(u, B0) = {:.10f}; Y^T (I - P) Y = {:.10f}", floor, gamma(c.inst.b0, c.inst.dataset)));
  const bool ok = ft.losses.back() <= kFtFloor && std::abs(lp.losses.back() - floor) <= kLpLimitTol;
  return {ok, fmt::format("FT loss at t=50 = {:.3g}; LP limit - min_u L = {:.3g}", ft.losses.back(), lp.losses.back() - floor)};
}

struct RegimeResult {
  std::vector<RegimeRow> rows;
  std::optional<double> interior_sigma;
};

RegimeResult& regime(const Canonical& c) {
  static RegimeResult r = [&] {
    ExperimentConfig cfg = c.cfg;
    cfg.replicas = kSweepReplicas;
    cfg.seed = kSeed;
    RegimeResult out;
    out.rows = regime_table(cfg, c.inst, regime_sigma_grid(c.inst.params(0.0), cfg.total_time()));
    for (std::size_t i = 1; i + 1 < out.rows.size(); ++i)
      if (out.rows[i].winner == Strategy::lpft && !out.interior_sigma) out.interior_sigma = out.rows[i].sigma;
    return out;
  }();
  return r;
}

Outcome criterion7(const Canonical& c) {
  const auto& r = regime(c);
  std::string line;
  for (const auto& row : r.rows)
    line += fmt::format("{}sigma={:.3f}:{}({:.1f})", line.empty() ? "" : " ", row.sigma, winner_name(row), row.margin);
  const bool ok = r.rows.front().winner == Strategy::ft && r.rows.back().winner == Strategy::lp && r.interior_sigma;
  return {ok, line};
}

Outcome criterion8(const Canonical& c) {
  const auto& r = regime(c);
  if (!r.interior_sigma) return {false, "no interior sigma with an LP-FT win"};
  ExperimentConfig cfg = c.cfg;
  cfg.replicas = kSweepReplicas;
  cfg.seed = kSeed;
  cfg.sigma = 0.0;
  const auto flat = utility_curve(cfg, c.inst);
  cfg.sigma = *r.interior_sigma;
  const auto mid = utility_curve(cfg, c.inst);
  const bool ok = flat.argmin == 0 && mid.interior_argmin() && mid.endpoint_margin() > kWinnerMargin;
  return {ok, fmt::format("sigma=0 argmin f={:.1f}; sigma={:.3f} argmin f={:.1f}, margin {:.2f} SE", flat.lp_fraction[flat.argmin],
                          cfg.sigma, mid.lp_fraction[mid.argmin], mid.endpoint_margin())};
}

Outcome criterion9() {
  const auto r = sensitivity_ratio_at_init(4, 16, kSensitivityPairs, kSeed);
  info(fmt::format("||B0||_F = sqrt(k) for orthonormal rows; head gap is 2 ||B0 B0^T e|| = 2, feature gap is 2 ||v0||"));
  const bool ok = r.head_in_band && r.features_in_band && r.in_theta_band;
  return {ok, fmt::format("Delta_v = {:.4f} in [{:.3f}, {:.3f}]; mean Delta_B = {:.4f} in [{:.3f}, {:.3f}]; ratio/sqrt(d) = {:.4f} "
                          "in [{:.3f}, {:.3f}]",
                          r.head_mean, r.head_band.first, r.head_band.second, r.features_mean, r.features_band.first,
                          r.features_band.second, r.ratio_over_sqrt_d, r.ratio_band.first, r.ratio_band.second)};
}

// Explicit-loop loss and normal-equations gamma.
double dense_loss(const TwoLayerModel& m, const Dataset& ds) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < ds.n(); ++i) {
    double pred = 0.0;
    for (Eigen::Index a = 0; a < m.k(); ++a)
      for (Eigen::Index j = 0; j < ds.d(); ++j) pred += ds.X()(i, j) * m.B()(a, j) * m.v()[a];
    s += (pred - ds.Y()[i]) * (pred - ds.Y()[i]);
  }
  return 0.5 * s;
}

double normal_equations_gamma(const Matrix& b, const Dataset& ds) {
  const Matrix M = ds.X() * b.transpose();
  const Vector u = (M.transpose() * M).ldlt().solve(M.transpose() * ds.Y());
  return (ds.Y() - M * u).squaredNorm();
}

Outcome criterion10(const Canonical& c) {
  Rng rng = derive_rng(kSeed, {kStreamModel});
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int d = std::uniform_int_distribution<int>(1, 8)(rng);
    const int n = std::uniform_int_distribution<int>(d, 16)(rng);
    const int k = std::uniform_int_distribution<int>(1, d)(rng);
    const Dataset ds = make_dataset(n, d, rng(), i % 2 == 0, i % 3 == 0 ? LabelModel::realizable : LabelModel::gaussian);
    const TwoLayerModel m(gaussian_vector(k, rng), gaussian_matrix(k, d, rng));
    const double l = loss(m, ds), g = gamma(m.B(), ds);
    worst = std::max({worst, std::abs(l - dense_loss(m, ds)) / std::max(1.0, l),
                      std::abs(g - normal_equations_gamma(m.B(), ds)) / std::max(1.0, g)});
  }
  const double sigma = 0.3, dt = 1e-2;
  const auto cfg = matched_config(c.inst.dataset, sigma, dt, 100, DiffusionKind::ft_uniform);
  const auto dp = dpgd_ensemble(c.inst.dataset, c.inst.b0, c.inst.init, cfg, kSeed, kInvariantReplicas);
  const auto diff = simulate_ensemble(c.inst.dataset, c.inst.b0, c.inst.init,
                                      {DiffusionKind::ft_uniform, sigma, dt, 1.0, kSeed + 1}, kInvariantReplicas,
                                      {1, false, {}, default_threads()});
  double zmax = 0.0;
  for (std::size_t s = 0; s < dp.mean_loss.size(); ++s)
    zmax = std::max(zmax, std::abs(dp.mean_loss[s] - diff.mean_loss[s]) / std::hypot(dp.se_loss[s], diff.se_loss(s)));
  // 101 correlated grid points: allow the 3 SE band plus the step-size slack.
  const bool ok = worst <= kOracleTol && zmax <= kSigmas + 1.0;
  return {ok, fmt::format("max relative oracle gap {:.2e}; DP-GD vs diffusion max z = {:.2f}", worst, zmax)};
}

Outcome criterion11() {
  bool mono = true;
  for (double rho : {0.3, 1.0, 3.0, 10.0, 30.0})
    for (std::size_t T : {1, 10, 100, 1000})
      for (double delta : {1e-7, 1e-5, 1e-3}) {
        const double e = accountant_epsilon(rho, T, delta);
        mono = mono && accountant_epsilon(rho * 1.25, T, delta) < e && accountant_epsilon(rho, T + 1, delta) > e &&
               accountant_epsilon(rho, T, delta * 2) < e;
      }
  const double e = accountant_epsilon(1.0, 1, 1e-5);
  return {mono && e >= 5.2 && e <= 5.4, fmt::format("monotone grid {}; eps(rho=1, T=1, delta=1e-5) = {:.4f}", mono ? "ok" : "broken", e)};
}

std::map<std::string, std::string> run_suite(const fs::path& root) {
  fs::remove_all(root);
  ExperimentConfig cfg;
  cfg.replicas = 200;
  cfg.horizon = 1.0;
  cfg.seed = kSeed;
  cfg.sigmas = {0.0, 0.9, 2.0};
  cfg.lp_fractions = {0.0, 0.25, 0.5, 0.75, 1.0};
  cfg.dpgd.steps = 100;
  cfg.dpgd.clip_norm = 1.0;
  cfg.dpgd.sigma_noise = 0.05;
  std::map<std::string, std::string> files;
  const std::vector<std::pair<std::string, nlohmann::json (*)(const ExperimentConfig&)>> cmds{
      {"dataset", commands::dataset_gen},  {"diffuse", commands::diffuse},         {"dpgd", commands::dpgd_run},
      {"drift", commands::invariants_drift}, {"verdict", commands::theory_verdict}, {"utility", commands::sweep_utility},
      {"regime", commands::sweep_regime},  {"bounds", commands::report_bounds}};
  for (const auto& [name, cmd] : cmds) {
    auto c = cfg;
    c.output_dir = (root / name).string();
    const auto manifest = cmd(c);
    files[name + "/manifest.json"] = read_text(root / name / "manifest.json");
    for (const auto& f : manifest["files"]) files[name + "/" + f["name"].get<std::string>()] = read_text(root / name / f["name"].get<std::string>());
  }
  return files;
}

Outcome criterion12(const fs::path& workdir) {
  // Same directory both times: the echoed config records the output path.
  const auto a = run_suite(workdir / "suite"), b = run_suite(workdir / "suite");
  std::size_t csv = 0, differing = 0;
  for (const auto& [name, bytes] : a) {
    if (name.ends_with(".csv")) ++csv;
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) {
      ++differing;
      info(fmt::format("differs: {}", name));
    }
  }
  return {differing == 0 && a.size() == b.size() && csv > 0,
          fmt::format("{} files ({} CSV, 8 manifests) compared, {} differ", a.size(), csv, differing)};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path workdir = fs::temp_directory_path() / "dpft_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--workdir" && i + 1 < argc) workdir = argv[++i];
    else {
      fmt::print(stderr, "usage: acceptance [--workdir DIR]\n");
      return 2;
    }
  }
  const Canonical c;
  report(1, "imbalance drift, uniform noise", [&] { return criterion1(c); });
  report(2, "imbalance drift, layerwise noise", [&] { return criterion2(c); });
  report(3, "linear-probing second moment", [&] { return criterion3(c); });
  report(4, "probing loss envelope", [] { return envelope(DiffusionKind::lp); });
  report(5, "fine-tuning loss envelope", [] { return envelope(DiffusionKind::ft_layerwise); });
  report(6, "gradient-flow limits", [&] { return criterion6(c); });
  report(7, "regime phase structure", [&] { return criterion7(c); });
  report(8, "utility-curve shape", [&] { return criterion8(c); });
  report(9, "sensitivity bands", [] { return criterion9(); });
  report(10, "oracle equivalence", [&] { return criterion10(c); });
  report(11, "accountant sanity", [] { return criterion11(); });
  report(12, "determinism", [&] { return criterion12(workdir); });
  fmt::print("acceptance: {} of 12 criteria passed\n", 12 - failures);
  return failures == 0 ? 0 : 1;
}
