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

// Experiment orchestration: utility curves over the probing fraction,
// noise-regime tables, bound envelopes, and the run-directory commands.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpft/bundle.hpp"
#include "dpft/config.hpp"
#include "dpft/core.hpp"
#include "dpft/diffusion.hpp"
#include "dpft/dpgd.hpp"
#include "dpft/invariants.hpp"
#include "dpft/output.hpp"
#include "dpft/params.hpp"
#include "dpft/theory.hpp"

namespace dpft {

struct Instance {
  Dataset dataset;
  Matrix b0;
  InitSpec init;

  BoundParams params(double sigma) const { return BoundParams::from_instance(dataset, b0, init.beta, sigma); }
};

inline Instance make_instance(const ExperimentConfig& cfg) {
  if (!cfg.bundle.empty()) {
    Bundle b = load_bundle(cfg.bundle);
    if (!b.features) throw ParameterError(fmt::format("bundle {} has no pretrained features", cfg.bundle));
    return {std::move(b.dataset), std::move(*b.features), {cfg.beta, cfg.init_seed, true}};
  }
  Dataset ds = make_dataset(cfg.n, cfg.d, cfg.dataset_seed, cfg.unit_labels, cfg.labels);
  Matrix b0 = make_pretrained_features(ds, cfg.k, cfg.target_gamma, cfg.dataset_seed);
  return {std::move(ds), std::move(b0), {cfg.beta, cfg.init_seed, true}};
}

inline std::vector<Phase> lpft_phases(DiffusionKind ft_kind, double total, double lp_fraction) {
  return {{DiffusionKind::lp, lp_fraction * total}, {ft_kind, (1.0 - lp_fraction) * total}};
}

struct Estimate {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  bool divergent = false;
};

// Margin of a below b in units of the combined standard error.
inline double z_margin(const Estimate& a, const Estimate& b) {
  const double s = std::hypot(a.se, b.se);
  return s > 0.0 ? (b.mean - a.mean) / s : (b.mean > a.mean ? std::numeric_limits<double>::infinity() : 0.0);
}

inline Estimate final_loss_estimate(const Instance& inst, const std::vector<Phase>& phases, double sigma,
                                    const ExperimentConfig& cfg) {
  try {
    const auto s = ensemble_final_loss(inst.dataset, inst.b0, inst.init, phases, sigma, cfg.dt, cfg.seed, cfg.replicas,
                                       cfg.thread_count());
    return {s.mean, s.standard_error(), false};
  } catch (const DivergenceError&) {
    return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(), true};
  }
}

struct UtilityCurve {
  double sigma = 0.0;
  std::vector<double> lp_fraction;
  std::vector<double> mean_loss, se;
  std::vector<bool> divergent;
  std::size_t argmin = 0;
  std::vector<std::size_t> ties;  // within one combined SE of the minimum

  Estimate at(std::size_t i) const { return {mean_loss[i], se[i], divergent[i]}; }

  bool interior_argmin() const { return argmin > 0 && argmin + 1 < lp_fraction.size(); }

  // Smallest margin (in combined SE) of the argmin below either endpoint.
  double endpoint_margin() const {
    const auto m = at(argmin);
    return std::min(z_margin(m, at(0)), z_margin(m, at(lp_fraction.size() - 1)));
  }
};

inline UtilityCurve utility_curve(const ExperimentConfig& cfg, const Instance& inst) {
  if (cfg.lp_fractions.empty()) throw ParameterError("utility curve needs lp_fractions");
  UtilityCurve c;
  c.sigma = cfg.sigma;
  const double T = cfg.total_time();
  for (double f : cfg.lp_fractions) {
    const auto e = final_loss_estimate(inst, lpft_phases(cfg.kind, T, f), cfg.sigma, cfg);
    c.lp_fraction.push_back(f);
    c.mean_loss.push_back(e.mean);
    c.se.push_back(e.se);
    c.divergent.push_back(e.divergent);
  }
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < c.mean_loss.size(); ++i)
    if (!c.divergent[i] && c.mean_loss[i] < best) {
      best = c.mean_loss[i];
      c.argmin = i;
    }
  for (std::size_t i = 0; i < c.mean_loss.size(); ++i)
    if (!c.divergent[i] && c.mean_loss[i] - best <= std::hypot(c.se[i], c.se[c.argmin])) c.ties.push_back(i);
  return c;
}

inline UtilityCurve utility_curve(const ExperimentConfig& cfg) { return utility_curve(cfg, make_instance(cfg)); }

struct RegimeRow {
  double sigma = 0.0;
  Estimate lp, ft, lpft;
  std::optional<Strategy> winner;  // empty on a tie (margin <= 1 combined SE)
  Strategy leader = Strategy::ft;  // lowest mean, tie or not
  double margin = 0.0;             // leader's margin over the runner-up, in combined SE
  RegimeVerdict predicted;
};

inline std::string winner_name(const RegimeRow& r) { return r.winner ? to_string(*r.winner) : "tie"; }

// Seven (or more) sigma values: zero, a quarter of the lower end of the
// predicted LP-FT interval, then evenly spaced sigma^2 across the interval.
inline std::vector<double> regime_sigma_grid(const BoundParams& p, double T, std::size_t points = 7) {
  if (points < 3) throw ParameterError("need at least three sigma values");
  const auto v = lpft_window(p, T);
  const double lo = std::max(0.0, v.sigma2_interval->first), hi = v.sigma2_interval->second;
  std::vector<double> s2{0.0};
  std::size_t span = points - 1;
  if (lo > 0.0) {
    s2.push_back(lo / 4.0);
    --span;
  }
  for (std::size_t i = 0; i < span; ++i) s2.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(span - 1));
  std::vector<double> out;
  for (double x : s2) out.push_back(std::sqrt(x));
  return out;
}

// LP, FT (cfg.kind) and a half/half LP-FT split at each sigma.
inline std::vector<RegimeRow> regime_table(const ExperimentConfig& cfg, const Instance& inst,
                                           const std::vector<double>& sigmas) {
  if (sigmas.size() < 3) throw ParameterError("regime table needs at least three sigma values");
  const double T = cfg.total_time();
  std::vector<RegimeRow> rows;
  for (double s : sigmas) {
    RegimeRow r;
    r.sigma = s;
    r.lp = final_loss_estimate(inst, {{DiffusionKind::lp, T}}, s, cfg);
    r.ft = final_loss_estimate(inst, {{cfg.kind, T}}, s, cfg);
    r.lpft = final_loss_estimate(inst, lpft_phases(cfg.kind, T, 0.5), s, cfg);
    r.predicted = lpft_window(inst.params(s), T);
    std::vector<std::pair<Strategy, Estimate>> c{{Strategy::lp, r.lp}, {Strategy::lpft, r.lpft}, {Strategy::ft, r.ft}};
    std::erase_if(c, [](const auto& e) { return e.second.divergent; });
    std::stable_sort(c.begin(), c.end(), [](const auto& a, const auto& b) { return a.second.mean < b.second.mean; });
    if (!c.empty()) {
      r.leader = c[0].first;
      r.margin = c.size() > 1 ? z_margin(c[0].second, c[1].second) : std::numeric_limits<double>::infinity();
      if (r.margin > 1.0) r.winner = r.leader;
    }
    rows.push_back(r);
  }
  return rows;
}

struct BoundReport {
  DiffusionKind kind = DiffusionKind::lp;
  bool applicable = false;
  std::string reason;
  std::vector<double> times, empirical, se, bound;
  std::vector<bool> pass;
  std::size_t violations = 0;
};

// Empirical mean loss against the closed-form envelope (LP, or fine-tuning
// with cfg.kind) over the recorded grid, at the 3 SE threshold.
inline BoundReport bound_report(const ExperimentConfig& cfg, const Instance& inst, DiffusionKind kind) {
  BoundReport rep;
  rep.kind = kind;
  const BoundParams p = inst.params(cfg.sigma);
  const auto a2 = check_scale_condition(p);
  rep.applicable = a2.ok;
  if (!a2.beta_ok) rep.reason = fmt::format("beta {:.6g} <= floor {:.6g}", p.beta, a2.beta_floor);
  else if (!a2.sigma_ok) rep.reason = fmt::format("sigma^2 {:.6g} >= ceiling {:.6g}", p.sigma2(), a2.sigma_ceiling);
  const auto stats = simulate_ensemble(inst.dataset, inst.b0, inst.init,
                                       {kind, cfg.sigma, cfg.dt, cfg.total_time(), cfg.seed}, cfg.replicas,
                                       {0, false, {}, cfg.thread_count()});
  for (std::size_t i = 0; i < stats.times.size(); ++i) {
    const double t = stats.times[i];
    double b = std::numeric_limits<double>::quiet_NaN();
    if (rep.applicable) {
      if (kind == DiffusionKind::lp) {
        b = lp_loss_bound(t, p);
      } else {
        try {
          b = ft_loss_bound(t, p).value;
        } catch (const AssumptionError& e) {
          rep.applicable = false;
          rep.reason = e.what();
        }
      }
    }
    rep.times.push_back(t);
    rep.empirical.push_back(stats.mean_loss[i]);
    rep.se.push_back(stats.se_loss(i));
    rep.bound.push_back(b);
  }
  for (std::size_t i = 0; i < rep.times.size(); ++i) {
    const bool ok = !rep.applicable || rep.empirical[i] <= rep.bound[i] + kPassSigmas * rep.se[i];
    if (!rep.applicable) rep.bound[i] = std::numeric_limits<double>::quiet_NaN();
    rep.pass.push_back(ok);
    rep.violations += ok ? 0 : 1;
  }
  return rep;
}

inline CsvTable bound_table(const BoundReport& r) {
  CsvTable t{{"time", "empirical", "SE", "bound", "pass"}, {}};
  for (std::size_t i = 0; i < r.times.size(); ++i)
    t.add_row({cell(r.times[i]), cell(r.empirical[i]), cell(r.se[i]), cell(r.bound[i]), cell(static_cast<bool>(r.pass[i]))});
  return t;
}

inline CsvTable utility_table(const std::vector<UtilityCurve>& curves) {
  CsvTable t{{"sigma", "lp_fraction", "mean_loss", "SE", "divergent", "argmin"}, {}};
  for (const auto& c : curves)
    for (std::size_t i = 0; i < c.lp_fraction.size(); ++i)
      t.add_row({cell(c.sigma), cell(c.lp_fraction[i]), cell(c.mean_loss[i]), cell(c.se[i]),
                 cell(static_cast<bool>(c.divergent[i])), cell(i == c.argmin)});
  return t;
}

inline CsvTable regime_csv(const std::vector<RegimeRow>& rows) {
  CsvTable t{{"sigma", "lp_mean", "lp_SE", "lpft_mean", "lpft_SE", "ft_mean", "ft_SE", "winner", "margin_SE",
              "predicted"},
             {}};
  for (const auto& r : rows)
    t.add_row({cell(r.sigma), cell(r.lp.mean), cell(r.lp.se), cell(r.lpft.mean), cell(r.lpft.se), cell(r.ft.mean),
               cell(r.ft.se), winner_name(r), cell(r.margin), to_string(r.predicted.best)});
  return t;
}

inline nlohmann::json verdict_json(const RegimeVerdict& v) {
  nlohmann::json j;
  j["best"] = to_string(v.best);
  j["log_argument"] = v.log_argument;
  j["t_max"] = v.t_max ? nlohmann::json(*v.t_max) : nlohmann::json(nullptr);
  j["sigma2_interval"] = v.sigma2_interval ? nlohmann::json::array({v.sigma2_interval->first, v.sigma2_interval->second})
                                           : nlohmann::json(nullptr);
  j["t_lp_window"] = v.t_lp_window ? nlohmann::json::array({v.t_lp_window->first, v.t_lp_window->second})
                                   : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json params_json(const BoundParams& p) {
  return {{"k", p.k}, {"d", p.d}, {"beta", p.beta}, {"sigma", p.sigma}, {"gamma", p.gamma},
          {"norm_Y", p.norm_Y}, {"norm_XtY", p.norm_XtY}, {"norm_B0XtY", p.norm_B0XtY}};
}

// Commands behind the CLI. Each writes its outputs, the echoed config and a
// manifest into cfg.output_dir and returns the manifest.
namespace commands {

inline RunDirectory open_run(const std::string& name, const ExperimentConfig& cfg) {
  RunDirectory run(cfg.output_dir, name, cfg);
  run.write("config.ini", config_to_ini(cfg));
  return run;
}

inline nlohmann::json dataset_gen(const ExperimentConfig& cfg) {
  auto run = open_run("dataset gen", cfg);
  const Instance inst = make_instance(cfg);
  Bundle b{inst.dataset, cfg.dataset_seed, inst.b0, std::nullopt};
  run.write("bundle.json", bundle_to_json(b).dump(1) + "\n");
  nlohmann::json info = params_json(inst.params(cfg.sigma));
  info["n"] = inst.dataset.n();
  info["orthonormality_error"] = orthonormality_error(inst.dataset.X());
  run.write("dataset.json", info.dump(2) + "\n");
  run.finish();
  return run.manifest();
}

inline nlohmann::json diffuse(const ExperimentConfig& cfg) {
  auto run = open_run("diffuse", cfg);
  const Instance inst = make_instance(cfg);
  EnsembleOptions opt;
  opt.threads = cfg.thread_count();
  const auto stats = simulate_ensemble(inst.dataset, inst.b0, inst.init,
                                       {cfg.kind, cfg.sigma, cfg.dt, cfg.total_time(), cfg.seed}, cfg.replicas, opt);
  run.write("ensemble.csv", ensemble_to_csv(stats));
  PlotSeries s{std::string(to_string(cfg.kind)), stats.times, stats.mean_loss, {}};
  for (std::size_t i = 0; i < stats.times.size(); ++i) s.err.push_back(stats.se_loss(i));
  run.write_plot("loss_curve", {"Mean loss", "time", "loss", {s}});
  run.finish();
  return run.manifest();
}

inline nlohmann::json dpgd_run(const ExperimentConfig& cfg) {
  auto run = open_run("dpgd run", cfg);
  const Instance inst = make_instance(cfg);
  const auto tr = run_schedule(replica_initial_model(inst.b0, inst.init, 0), inst.dataset, cfg.dpgd, cfg.seed);
  CsvTable t{{"step", "loss"}, {}};
  for (std::size_t s = 0; s < tr.losses.size(); ++s) t.add_row({cell(s), cell(tr.losses[s])});
  run.write("dpgd_loss.csv", emit_csv(t));
  run.write("privacy.json", to_json(privacy_report(cfg.dpgd, static_cast<std::size_t>(inst.dataset.n()), cfg.delta)).dump(2) + "\n");
  run.finish();
  return run.manifest();
}

inline nlohmann::json invariants_drift(const ExperimentConfig& cfg) {
  cfg.require_statistical();
  if (cfg.kind == DiffusionKind::lp) throw ParameterError("drift report needs a fine-tuning kind");
  auto run = open_run("invariants drift", cfg);
  const Instance inst = make_instance(cfg);
  EnsembleOptions opt;
  opt.track_eigenvalues = true;
  opt.windows = {cfg.window};
  opt.threads = cfg.thread_count();
  const double horizon = std::max(cfg.total_time(), cfg.window.second);
  const auto stats = simulate_ensemble(inst.dataset, inst.b0, inst.init, {cfg.kind, cfg.sigma, cfg.dt, horizon, cfg.seed},
                                       cfg.replicas, opt);
  const auto est = estimate_imbalance_drift(stats, cfg.window);
  const Matrix target = expected_imbalance_drift(cfg.kind, cfg.sigma, inst.b0.rows(), inst.dataset.d());
  run.write("drift.csv", drift_rows_to_csv(drift_rows(est, target)));
  const auto eig = eigen_drift_check(stats, cfg.window);
  nlohmann::json j;
  j["window"] = {cfg.window.first, cfg.window.second};
  j["eigen_slopes"] = std::vector<double>(eig.slope.data(), eig.slope.data() + eig.slope.size());
  j["eigen_se"] = std::vector<double>(eig.se.data(), eig.se.data() + eig.se.size());
  j["eigen_target"] = eig.target;
  j["trace_slope"] = eig.trace_slope;
  j["trace_se"] = eig.trace_se;
  j["trace_target"] = eig.trace_target;
  j["near_crossings"] = eig.near_crossings;
  j["all_pass"] = eig.all_pass();
  run.write("eigen_drift.json", j.dump(2) + "\n");
  run.finish();
  return run.manifest();
}

inline nlohmann::json theory_verdict(const ExperimentConfig& cfg) {
  auto run = open_run("theory verdict", cfg);
  const Instance inst = make_instance(cfg);
  const BoundParams p = inst.params(cfg.sigma);
  const auto a2 = check_scale_condition(p);
  nlohmann::json j;
  j["params"] = params_json(p);
  j["scale_condition"] = {{"ok", a2.ok}, {"beta_floor", a2.beta_floor}, {"sigma2_ceiling", a2.sigma_ceiling},
                          {"terms", {a2.terms[0], a2.terms[1], a2.terms[2]}}};
  j["regime"] = verdict_json(lpft_window(p, cfg.total_time()));
  std::optional<FtBound> ft;
  try {
    ft = ft_loss_bound(0.0, p);
    j["ft_bound"] = {{"c", ft->c}, {"L_square", ft->L_square}};
    j["lp_better"] = lp_better_condition(p);
  } catch (const AssumptionError& e) {
    j["ft_bound"] = {{"error", e.what()}};
    j["lp_better"] = nullptr;
  }
  run.write("verdict.json", j.dump(2) + "\n");
  CsvTable t{{"time", "lp_bound", "ft_bound"}, {}};
  constexpr std::size_t kPoints = 101;
  for (std::size_t i = 0; i < kPoints; ++i) {
    const double tt = cfg.total_time() * static_cast<double>(i) / static_cast<double>(kPoints - 1);
    t.add_row({cell(tt), cell(lp_loss_bound(tt, p)), cell(ft ? ft_loss_bound(tt, p).value : std::numeric_limits<double>::quiet_NaN())});
  }
  run.write("theory_bounds.csv", emit_csv(t));
  run.finish();
  return run.manifest();
}

inline nlohmann::json sweep_utility(const ExperimentConfig& cfg) {
  cfg.require_statistical();
  auto run = open_run("sweep utility", cfg);
  const Instance inst = make_instance(cfg);
  std::vector<UtilityCurve> curves;
  Plot plot{"Final loss against probing fraction", "LP fraction", "mean final loss", {}};
  for (double s : cfg.sigmas.empty() ? std::vector<double>{cfg.sigma} : cfg.sigmas) {
    ExperimentConfig c = cfg;
    c.sigma = s;
    curves.push_back(utility_curve(c, inst));
    plot.series.push_back({fmt::format("sigma={:.4g}", s), curves.back().lp_fraction, curves.back().mean_loss, curves.back().se});
  }
  run.write("utility.csv", emit_csv(utility_table(curves)));
  run.write_plot("utility_curves", plot);
  run.finish();
  return run.manifest();
}

inline nlohmann::json sweep_regime(const ExperimentConfig& cfg) {
  cfg.require_statistical();
  auto run = open_run("sweep regime", cfg);
  const Instance inst = make_instance(cfg);
  const auto sigmas = cfg.sigmas.empty() ? regime_sigma_grid(inst.params(0.0), cfg.total_time()) : cfg.sigmas;
  const auto rows = regime_table(cfg, inst, sigmas);
  run.write("regime.csv", emit_csv(regime_csv(rows)));
  Plot plot{"Final loss by strategy", "sigma", "mean final loss", {}};
  for (auto [name, pick] : {std::pair{"LP", &RegimeRow::lp}, std::pair{"LPFT", &RegimeRow::lpft}, std::pair{"FT", &RegimeRow::ft}}) {
    PlotSeries s{name, {}, {}, {}};
    for (const auto& r : rows) {
      s.x.push_back(r.sigma);
      s.y.push_back((r.*pick).mean);
      s.err.push_back((r.*pick).se);
    }
    plot.series.push_back(s);
  }
  run.write_plot("regime_curves", plot);
  run.finish();
  return run.manifest();
}

inline nlohmann::json report_bounds(const ExperimentConfig& cfg) {
  cfg.require_statistical();
  auto run = open_run("report bounds", cfg);
  const Instance inst = make_instance(cfg);
  nlohmann::json summary;
  Plot plot{"Empirical loss and closed-form bounds", "time", "loss", {}};
  const DiffusionKind ft_kind = cfg.kind == DiffusionKind::lp ? DiffusionKind::ft_layerwise : cfg.kind;
  for (auto [name, kind] : {std::pair{"lp", DiffusionKind::lp}, std::pair{"ft", ft_kind}}) {
    const auto rep = bound_report(cfg, inst, kind);
    run.write(fmt::format("bounds_{}.csv", name), emit_csv(bound_table(rep)));
    summary[name] = {{"kind", to_string(kind)}, {"applicable", rep.applicable}, {"reason", rep.reason},
                     {"violations", rep.violations}, {"points", rep.times.size()}};
    plot.series.push_back({fmt::format("{} empirical", name), rep.times, rep.empirical, rep.se});
    if (rep.applicable) plot.series.push_back({fmt::format("{} bound", name), rep.times, rep.bound, {}});
  }
  run.write("bounds.json", summary.dump(2) + "\n");
  run.write_plot("bounds_curves", plot);
  run.finish();
  return run.manifest();
}

}  // namespace commands

}  // namespace dpft
