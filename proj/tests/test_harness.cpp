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

#include <cstdlib>
#include <filesystem>

#include <gtest/gtest.h>

#include "dpft/harness.hpp"

namespace dpft {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "dpft_harness_tests" / name;
  fs::remove_all(p);
  return p;
}

ExperimentConfig quick(std::size_t replicas = 200) {
  ExperimentConfig c;
  c.replicas = replicas;
  c.threads = 1;
  return c;
}

TEST(Config, DefaultsAreCanonical) {
  const ExperimentConfig c = parse_config("");
  EXPECT_EQ(c.n, 8);
  EXPECT_EQ(c.d, 4);
  EXPECT_EQ(c.k, 3);
  EXPECT_EQ(c.lp_fractions.size(), 11u);
  EXPECT_DOUBLE_EQ(c.total_time(), 4.0);
  EXPECT_EQ(c.kind, DiffusionKind::ft_uniform);
}

TEST(Config, ParsesEverySection) {
  const auto c = parse_config(R"([dataset]
n = 12
d = 5
k = 2
seed = 3
target_gamma = 0.6
labels = gaussian
[init]
beta = 0.5
[run]
kind = ft_layerwise
sigma = 0.25
sigmas = 0, 0.5, 1
lp_fractions = 0, 0.5, 1
time_per_epoch = 0.5
epochs = 6
dt = 0.005
replicas = 300
window = 0.5, 1.5
[dpgd]
clip_norm = 2
sigma_noise = 0.1
steps = 50
lp_steps = 10
mode = ft_uniform
adjacency = add_remove
delta = 1e-6
[output]
dir = somewhere
)");
  EXPECT_EQ(c.n, 12);
  EXPECT_EQ(c.k, 2);
  EXPECT_EQ(c.labels, LabelModel::gaussian);
  EXPECT_EQ(c.kind, DiffusionKind::ft_layerwise);
  EXPECT_EQ(c.sigmas, (std::vector<double>{0, 0.5, 1}));
  EXPECT_DOUBLE_EQ(c.total_time(), 3.0);
  EXPECT_EQ(c.window, (std::pair<double, double>{0.5, 1.5}));
  EXPECT_EQ(c.dpgd.adjacency, Adjacency::add_remove);
  EXPECT_EQ(c.dpgd.lp_steps, 10u);
  EXPECT_DOUBLE_EQ(c.delta, 1e-6);
  EXPECT_EQ(c.output_dir, "somewhere");
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("[run]\nsigmaa = 1\n"), ParameterError);
  EXPECT_THROW(parse_config("[run]\nsigma = abc\n"), ParameterError);
  EXPECT_THROW(parse_config("[run]\nlp_fractions = 0.5, 0.2\n"), ParameterError);
  EXPECT_THROW(parse_config("[run]\nlp_fractions = 0, 1.5\n"), ParameterError);
  EXPECT_THROW(parse_config("[run]\nwindow = 1\n"), ParameterError);
  EXPECT_THROW(parse_config("[dataset]\nk = 9\n"), DimensionError);
  EXPECT_THROW(parse_config("stray = 1\n"), ParameterError);
  EXPECT_THROW(load_config("/nonexistent/dpft.ini"), IoError);
  EXPECT_THROW(quick(50).require_statistical(), ParameterError);
}

TEST(Config, EchoRoundTripsAndHashIgnoresOutputDir) {
  auto c = parse_config("[run]\nsigma = 0.3\nsigmas = 0.1, 0.2\n[dpgd]\nsteps = 7\n");
  const auto back = parse_config(config_to_ini(c));
  EXPECT_EQ(config_to_ini(back), config_to_ini(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  auto moved = c;
  moved.output_dir = "elsewhere";
  EXPECT_EQ(config_hash(moved), config_hash(c));
  moved.sigma = 0.31;
  EXPECT_NE(config_hash(moved), config_hash(c));
}

TEST(Utility, NoiselessArgminIsPureFineTuning) {
  auto c = quick(100);
  c.sigma = 0.0;
  const auto u = utility_curve(c);
  EXPECT_EQ(u.argmin, 0u);
  EXPECT_EQ(u.lp_fraction.size(), 11u);
  for (double s : u.se) EXPECT_GE(s, 0.0);
}

TEST(Utility, FullProbingEqualsPureLinearProbing) {
  auto c = quick(200);
  c.sigma = 0.5;
  const Instance inst = make_instance(c);
  const auto u = utility_curve(c, inst);
  const auto lp = final_loss_estimate(inst, {{DiffusionKind::lp, c.total_time()}}, c.sigma, c);
  EXPECT_EQ(u.mean_loss.back(), lp.mean);
  EXPECT_EQ(u.se.back(), lp.se);
}

TEST(Utility, InteriorOptimumInsideWindow) {
  auto c = quick(1000);
  c.sigma = 0.931;
  const auto u = utility_curve(c);
  EXPECT_TRUE(u.interior_argmin()) << u.argmin;
  EXPECT_GT(u.endpoint_margin(), 1.0);
  // Soft concavity of the loss analogue: second differences >= -3 SE at most interior points.
  std::size_t ok = 0, interior = u.lp_fraction.size() - 2;
  for (std::size_t i = 1; i + 1 < u.lp_fraction.size(); ++i) {
    const double second = u.mean_loss[i + 1] - 2 * u.mean_loss[i] + u.mean_loss[i - 1];
    const double se = std::sqrt(u.se[i + 1] * u.se[i + 1] + 4 * u.se[i] * u.se[i] + u.se[i - 1] * u.se[i - 1]);
    ok += second >= -3 * se ? 1 : 0;
  }
  EXPECT_GT(2 * ok, interior);
}

TEST(Regime, SigmaGridSpansInterval) {
  const auto c = quick();
  const auto p = make_instance(c).params(0.0);
  const auto g = regime_sigma_grid(p, c.total_time());
  ASSERT_EQ(g.size(), 7u);
  EXPECT_EQ(g.front(), 0.0);
  const auto v = lpft_window(p, c.total_time());
  EXPECT_NEAR(g.back() * g.back(), v.sigma2_interval->second, 1e-12);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_GT(g[i], g[i - 1]);
  EXPECT_THROW(regime_sigma_grid(p, 4.0, 2), ParameterError);
}

TEST(Regime, ExtremesMatchTheory) {
  auto c = quick(300);
  const Instance inst = make_instance(c);
  const double big = 3.0;
  const auto rows = regime_table(c, inst, {0.0, 0.9, big});
  ASSERT_EQ(rows.size(), 3u);
  ASSERT_TRUE(rows[0].winner);
  EXPECT_EQ(*rows[0].winner, Strategy::ft);
  EXPECT_EQ(rows[0].predicted.best, Strategy::ft);
  ASSERT_TRUE(rows[2].winner);
  EXPECT_EQ(*rows[2].winner, Strategy::lp);
  EXPECT_EQ(rows[2].predicted.best, Strategy::lp);
  const std::string csv = emit_csv(regime_csv(rows));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "sigma,lp_mean,lp_SE,lpft_mean,lpft_SE,ft_mean,ft_SE,winner,margin_SE,predicted");
  EXPECT_THROW(regime_table(c, inst, {0.0, 1.0}), ParameterError);
}

TEST(Regime, NoiselessLongHorizonLimits) {
  auto c = quick(100);
  c.horizon = 50.0;
  const Instance inst = make_instance(c);
  const auto rows = regime_table(c, inst, {0.0, 0.0, 0.0});
  const double g = gamma(inst.b0, inst.dataset);
  EXPECT_LE(rows[0].lp.mean, g);
  EXPECT_NEAR(rows[0].lp.mean, min_head_loss(inst.b0, inst.dataset), 1e-6);
  EXPECT_LE(rows[0].ft.mean, 1e-3);
  EXPECT_LE(rows[0].lpft.mean, 1e-3);
}

TEST(Regime, TieWhenMarginIsSmall) {
  auto c = quick(100);
  const Instance inst = make_instance(c);
  c.horizon = 2e-2;  // two steps: all strategies nearly equal
  const auto rows = regime_table(c, inst, {0.5, 0.6, 0.7});
  for (const auto& r : rows) {
    if (r.margin <= 1.0) EXPECT_EQ(winner_name(r), "tie");
    else EXPECT_NE(winner_name(r), "tie");
  }
}

TEST(Bounds, NoiselessProbingEnvelope) {
  auto c = quick(1000);
  c.sigma = 0.0;
  const Instance inst = make_instance(c);
  const auto rep = bound_report(c, inst, DiffusionKind::lp);
  ASSERT_TRUE(rep.applicable) << rep.reason;
  EXPECT_EQ(rep.violations, 0u);
  const auto p = inst.params(0.0);
  for (std::size_t i = 0; i < rep.times.size(); ++i) EXPECT_LE(lp_loss_expectation(rep.times[i], p), rep.bound[i] + 1e-12);
  EXPECT_LE(std::abs(rep.empirical[0] - rep.bound[0]), 3 * rep.se[0]);
  const std::string csv = emit_csv(bound_table(rep));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "time,empirical,SE,bound,pass");
}

TEST(Bounds, InitialValueCoincidesInExpectation) {
  auto c = quick(10000);
  c.sigma = 0.1;
  c.horizon = 0.05;
  const Instance inst = make_instance(c);
  for (auto kind : {DiffusionKind::lp, DiffusionKind::ft_layerwise}) {
    const auto rep = bound_report(c, inst, kind);
    ASSERT_TRUE(rep.applicable) << rep.reason;
    EXPECT_LE(std::abs(rep.empirical[0] - rep.bound[0]), 3 * rep.se[0]);
  }
}

TEST(Bounds, ReportMarksInapplicable) {
  auto c = quick(100);
  c.sigma = 2.0;
  const auto rep = bound_report(c, make_instance(c), DiffusionKind::ft_layerwise);
  EXPECT_FALSE(rep.applicable);
  EXPECT_FALSE(rep.reason.empty());
  EXPECT_EQ(rep.violations, 0u);
  for (double b : rep.bound) EXPECT_TRUE(std::isnan(b));
}

TEST(Bounds, ViolationCountMatchesFlags) {
  auto c = quick(500);
  c.sigma = 0.05;
  const auto rep = bound_report(c, make_instance(c), DiffusionKind::ft_layerwise);
  ASSERT_TRUE(rep.applicable);
  EXPECT_EQ(rep.violations, static_cast<std::size_t>(std::count(rep.pass.begin(), rep.pass.end(), false)));
}

Plot three_point_plot() {
  return {"Golden & <check>", "x", "y", {{"series A", {0.0, 0.5, 1.0}, {1.0, 0.25, 0.5}, {0.1, 0.05, 0.0}}}};
}

TEST(Plot, EmptySeriesRejected) {
  EXPECT_THROW(render_svg({"t", "x", "y", {}}), ParameterError);
  EXPECT_THROW(render_svg({"t", "x", "y", {{"a", {}, {}, {}}}}), ParameterError);
  EXPECT_THROW(render_svg({"t", "x", "y", {{"a", {1.0}, {1.0, 2.0}, {}}}}), ParameterError);
}

TEST(Plot, GoldenSvg) {
  const fs::path golden = fs::path(DPFT_TEST_DATA) / "golden_three_point.svg";
  const std::string svg = render_svg(three_point_plot());
  if (std::getenv("DPFT_REGENERATE_GOLDEN")) write_text(golden, svg);
  EXPECT_EQ(svg, read_text(golden));
}

TEST(Plot, EmitsSvgAndCsv) {
  const auto dir = scratch("plot");
  emit_plot(three_point_plot(), dir / "curve.svg");
  EXPECT_EQ(read_text(dir / "curve.svg"), render_svg(three_point_plot()));
  const auto table = parse_csv(read_text(dir / "curve.csv"));
  EXPECT_EQ(table.header, (std::vector<std::string>{"series", "x", "y", "err"}));
  EXPECT_EQ(table.rows.size(), 3u);
}

TEST(Csv, RoundTrip) {
  CsvTable t{{"a", "b"}, {}};
  t.add_row({cell(0.1), cell(std::size_t{3})});
  t.add_row({cell(std::numeric_limits<double>::quiet_NaN()), cell(true)});
  EXPECT_EQ(parse_csv(emit_csv(t)), t);
  EXPECT_THROW(t.add_row({"x"}), DimensionError);
  CsvTable bad{{"a"}, {{"x,y"}}};
  EXPECT_THROW(emit_csv(bad), ParameterError);
}

nlohmann::json run_into(const fs::path& dir, nlohmann::json (*command)(const ExperimentConfig&),
                        ExperimentConfig cfg) {
  cfg.output_dir = dir.string();
  return command(cfg);
}

TEST(Commands, EachWritesItsFilesAndManifest) {
  auto c = quick(100);
  c.horizon = 1.0;
  c.sigmas = {0.0, 0.5, 2.0};
  c.lp_fractions = {0.0, 0.5, 1.0};
  c.dpgd.steps = 20;
  c.dpgd.clip_norm = 1.0;
  c.dpgd.sigma_noise = 0.1;
  const std::vector<std::pair<nlohmann::json (*)(const ExperimentConfig&), std::vector<std::string>>> cases{
      {commands::dataset_gen, {"bundle.json", "dataset.json"}},
      {commands::diffuse, {"ensemble.csv", "loss_curve.svg", "loss_curve.csv"}},
      {commands::dpgd_run, {"dpgd_loss.csv", "privacy.json"}},
      {commands::invariants_drift, {"drift.csv", "eigen_drift.json"}},
      {commands::theory_verdict, {"verdict.json", "theory_bounds.csv"}},
      {commands::sweep_utility, {"utility.csv", "utility_curves.svg", "utility_curves.csv"}},
      {commands::sweep_regime, {"regime.csv", "regime_curves.svg", "regime_curves.csv"}},
      {commands::report_bounds, {"bounds_lp.csv", "bounds_ft.csv", "bounds.json", "bounds_curves.svg"}},
  };
  int i = 0;
  for (const auto& [cmd, files] : cases) {
    const auto dir = scratch(fmt::format("cmd{}", i++));
    const auto manifest = run_into(dir, cmd, c);
    EXPECT_TRUE(fs::exists(dir / "manifest.json"));
    EXPECT_TRUE(fs::exists(dir / "config.ini"));
    EXPECT_EQ(nlohmann::json::parse(read_text(dir / "manifest.json")), manifest);
    EXPECT_EQ(manifest["config_hash"], config_hash(c));
    for (const auto& f : files) EXPECT_TRUE(fs::exists(dir / f)) << manifest["command"] << " " << f;
    EXPECT_EQ(parse_config(read_text(dir / "config.ini")).replicas, c.replicas);
  }
}

TEST(Commands, BundleFeedsLaterRuns) {
  auto c = quick(100);
  const auto dir = scratch("bundle");
  run_into(dir, commands::dataset_gen, c);
  auto d = quick(100);
  d.bundle = (dir / "bundle.json").string();
  d.n = 99;  // ignored when a bundle is given
  const Instance a = make_instance(c), b = make_instance(d);
  EXPECT_TRUE(a.dataset.X() == b.dataset.X());
  EXPECT_TRUE(a.b0 == b.b0);
}

TEST(Determinism, IdenticalConfigGivesIdenticalBytes) {
  auto c = quick(150);
  c.horizon = 1.0;
  c.sigmas = {0.0, 0.9, 2.0};
  for (auto cmd : {commands::diffuse, commands::sweep_regime, commands::invariants_drift}) {
    const auto a = scratch("det_a"), b = scratch("det_b");
    const auto ma = run_into(a, cmd, c);
    auto c2 = c;
    c2.threads = 3;
    const auto mb = run_into(b, cmd, c2);
    for (const auto& f : ma["files"]) {
      const std::string name = f["name"];
      if (name == "config.ini") continue;  // echoes the thread count
      EXPECT_EQ(read_text(a / name), read_text(b / name)) << name;
    }
  }
}

TEST(Commands, StatisticalOutputsNeedReplicas) {
  auto c = quick(10);
  c.output_dir = scratch("few").string();
  EXPECT_THROW(commands::sweep_utility(c), ParameterError);
  EXPECT_THROW(commands::report_bounds(c), ParameterError);
  c.kind = DiffusionKind::lp;
  c.replicas = 200;
  EXPECT_THROW(commands::invariants_drift(c), ParameterError);
}

}  // namespace
}  // namespace dpft
