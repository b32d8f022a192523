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

// Command-line front end: `lab <group> <action> --config FILE [--out DIR]`.

#include <cstdio>
#include <functional>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "dpft/harness.hpp"

namespace {

using Command = std::function<nlohmann::json(const dpft::ExperimentConfig&)>;

struct Leaf {
  std::string config;
  std::string out;
  unsigned threads = 0;
  bool quiet = false;
  Command run;
};

void add_leaf(CLI::App& parent, const std::string& name, const std::string& help, Command run,
              std::vector<std::unique_ptr<Leaf>>& leaves) {
  auto leaf = std::make_unique<Leaf>();
  leaf->run = std::move(run);
  CLI::App* sub = parent.add_subcommand(name, help);
  sub->add_option("-c,--config", leaf->config, "INI config file (defaults apply when omitted)")->check(CLI::ExistingFile);
  sub->add_option("-o,--out", leaf->out, "run directory; overrides [output] dir");
  sub->add_option("-j,--threads", leaf->threads, "worker threads; overrides [run] threads");
  sub->add_flag("-q,--quiet", leaf->quiet, "do not print the manifest");
  Leaf* raw = leaf.get();
  sub->callback([raw] {
    dpft::ExperimentConfig cfg = raw->config.empty() ? dpft::parse_config("") : dpft::load_config(raw->config);
    if (!raw->out.empty()) cfg.output_dir = raw->out;
    if (raw->threads > 0) cfg.threads = raw->threads;
    const auto manifest = raw->run(cfg);
    if (!raw->quiet) std::cout << manifest.dump(2) << "\n";
  });
  leaves.push_back(std::move(leaf));
}

}  // namespace

int main(int argc, char** argv) {
  namespace cmd = dpft::commands;
  CLI::App app{"Linear probing and fine-tuning under DP noise: simulations, invariants and bounds", "lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dpft::kVersion);
  std::vector<std::unique_ptr<Leaf>> leaves;

  auto* dataset = app.add_subcommand("dataset", "dataset bundles")->require_subcommand(1);
  add_leaf(*dataset, "gen", "generate a dataset bundle with pretrained features", cmd::dataset_gen, leaves);
  add_leaf(app, "diffuse", "simulate a Langevin ensemble", cmd::diffuse, leaves);
  auto* dpgd = app.add_subcommand("dpgd", "discrete private gradient descent")->require_subcommand(1);
  add_leaf(*dpgd, "run", "run one DP-GD schedule and account its privacy", cmd::dpgd_run, leaves);
  auto* inv = app.add_subcommand("invariants", "imbalance-matrix checks")->require_subcommand(1);
  add_leaf(*inv, "drift", "estimate the imbalance drift over a window", cmd::invariants_drift, leaves);
  auto* theory = app.add_subcommand("theory", "closed-form bounds")->require_subcommand(1);
  add_leaf(*theory, "verdict", "evaluate the assumption, bounds and regime prediction", cmd::theory_verdict, leaves);
  auto* sweep = app.add_subcommand("sweep", "parameter sweeps")->require_subcommand(1);
  add_leaf(*sweep, "utility", "final loss against the probing fraction", cmd::sweep_utility, leaves);
  add_leaf(*sweep, "regime", "LP, FT and LP-FT across noise scales", cmd::sweep_regime, leaves);
  auto* rep = app.add_subcommand("report", "reports")->require_subcommand(1);
  add_leaf(*rep, "bounds", "empirical loss against the closed-form envelopes", cmd::report_bounds, leaves);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const dpft::ParameterError& e) {
    fmt::print(stderr, "lab: invalid configuration: {}\n", e.what());
    return 2;
  } catch (const dpft::DimensionError& e) {
    fmt::print(stderr, "lab: invalid configuration: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "lab: {}\n", e.what());
    return 1;
  }
  return 0;
}
