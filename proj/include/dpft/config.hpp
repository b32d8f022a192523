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

// Declarative experiment configuration: an INI file of key = value pairs
// grouped in [dataset], [init], [run], [dpgd] and [output] sections.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "dpft/core.hpp"
#include "dpft/diffusion.hpp"
#include "dpft/dpgd.hpp"
#include "dpft/error.hpp"

namespace dpft {

struct ExperimentConfig {
  // [dataset]
  Eigen::Index n = canonical::kN, d = canonical::kD, k = canonical::kK;
  std::uint64_t dataset_seed = canonical::kSeed;
  double target_gamma = canonical::kTargetGamma;
  bool unit_labels = true;
  LabelModel labels = LabelModel::realizable;
  std::string bundle;  // optional dataset bundle; overrides the generator

  // [init]
  double beta = canonical::kBeta;
  std::uint64_t init_seed = 11;

  // [run]
  DiffusionKind kind = DiffusionKind::ft_uniform;
  double sigma = 0.1;
  std::vector<double> sigmas;
  std::vector<double> lp_fractions{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  double horizon = canonical::kHorizon;
  double time_per_epoch = 1.0;
  std::optional<double> epochs;  // horizon = epochs * time_per_epoch when set
  double dt = 1e-2;
  std::size_t replicas = 1000;
  std::uint64_t seed = 2024;
  unsigned threads = 0;  // 0: hardware concurrency
  std::pair<double, double> window{0.0, 1.0};

  // [dpgd]
  DpGdConfig dpgd;
  double delta = 1e-5;

  // [output]
  std::string output_dir = "runs/default";

  double total_time() const { return epochs ? *epochs * time_per_epoch : horizon; }
  unsigned thread_count() const { return threads == 0 ? default_threads() : threads; }

  void validate() const {
    if (n < d || d < 1) throw DimensionError("need n >= d >= 1");
    if (k < 1 || k > d) throw DimensionError("need 1 <= k <= d");
    if (!(beta > 0.0)) throw ParameterError("beta must be > 0");
    if (!(sigma >= 0.0)) throw ParameterError("sigma must be >= 0");
    for (double s : sigmas)
      if (!(s >= 0.0)) throw ParameterError("sigmas must be >= 0");
    for (std::size_t i = 0; i < lp_fractions.size(); ++i) {
      const double f = lp_fractions[i];
      if (!(f >= 0.0 && f <= 1.0)) throw ParameterError("lp_fractions must lie in [0, 1]");
      if (i > 0 && !(f > lp_fractions[i - 1])) throw ParameterError("lp_fractions must be sorted and unique");
    }
    if (!(total_time() >= 0.0)) throw ParameterError("horizon must be >= 0");
    if (!(time_per_epoch > 0.0)) throw ParameterError("time_per_epoch must be > 0");
    if (!(window.second > window.first) || window.first < 0.0) throw ParameterError("window needs 0 <= t0 < t1");
    if (!(delta > 0.0 && delta < 1.0)) throw ParameterError("delta must be in (0, 1)");
    DiffusionSpec{kind, sigma, dt, total_time(), seed}.validate();
    dpgd.validate();
  }

  // Statistical outputs need at least this many replicas.
  static constexpr std::size_t kMinReplicas = 100;
  void require_statistical() const {
    if (replicas < kMinReplicas)
      throw ParameterError(fmt::format("replicas = {} is below the minimum of {} for statistical outputs", replicas,
                                       kMinReplicas));
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  try {
    std::size_t used = 0;
    const double x = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return x;
  } catch (const std::exception&) {
    throw ParameterError(fmt::format("{}: '{}' is not a number", key, raw));
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw ParameterError(fmt::format("{}: '{}' is not a non-negative integer", key, raw));
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw ParameterError(fmt::format("{}: '{}' is out of range", key, raw));
  }
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ParameterError(fmt::format("{}: '{}' is not a boolean", key, raw));
}

inline std::vector<double> parse_list(const std::string& key, const std::string& raw) {
  std::vector<double> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(parse_double(key, item));
  return out;
}

inline std::string format_double(double x) { return fmt::format("{:.17g}", x); }

inline std::string format_list(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + format_double(xs[i]);
  return out;
}

}  // namespace detail

// Flattened section.key -> value map with every field present; the basis of
// both the config hash and the echoed config in run directories.
inline std::map<std::string, std::string> config_entries(const ExperimentConfig& c) {
  using detail::format_double;
  std::map<std::string, std::string> e;
  e["dataset.n"] = std::to_string(c.n);
  e["dataset.d"] = std::to_string(c.d);
  e["dataset.k"] = std::to_string(c.k);
  e["dataset.seed"] = std::to_string(c.dataset_seed);
  e["dataset.target_gamma"] = format_double(c.target_gamma);
  e["dataset.unit_labels"] = c.unit_labels ? "true" : "false";
  e["dataset.labels"] = c.labels == LabelModel::realizable ? "realizable" : "gaussian";
  e["dataset.bundle"] = c.bundle;
  e["init.beta"] = format_double(c.beta);
  e["init.seed"] = std::to_string(c.init_seed);
  e["run.kind"] = to_string(c.kind);
  e["run.sigma"] = format_double(c.sigma);
  e["run.sigmas"] = detail::format_list(c.sigmas);
  e["run.lp_fractions"] = detail::format_list(c.lp_fractions);
  e["run.horizon"] = format_double(c.horizon);
  e["run.time_per_epoch"] = format_double(c.time_per_epoch);
  e["run.epochs"] = c.epochs ? format_double(*c.epochs) : "";
  e["run.dt"] = format_double(c.dt);
  e["run.replicas"] = std::to_string(c.replicas);
  e["run.seed"] = std::to_string(c.seed);
  e["run.threads"] = std::to_string(c.threads);
  e["run.window"] = detail::format_list({c.window.first, c.window.second});
  e["dpgd.learning_rate"] = format_double(c.dpgd.learning_rate);
  e["dpgd.clip_norm"] = format_double(c.dpgd.clip_norm);
  e["dpgd.sigma_noise"] = format_double(c.dpgd.sigma_noise);
  e["dpgd.steps"] = std::to_string(c.dpgd.steps);
  e["dpgd.lp_steps"] = std::to_string(c.dpgd.lp_steps);
  e["dpgd.mode"] = to_string(c.dpgd.mode);
  e["dpgd.batch_size"] = std::to_string(c.dpgd.batch_size);
  e["dpgd.adjacency"] = to_string(c.dpgd.adjacency);
  e["dpgd.delta"] = format_double(c.delta);
  e["output.dir"] = c.output_dir;
  return e;
}

inline std::string config_to_ini(const ExperimentConfig& c) {
  std::string out, section;
  for (const auto& [key, value] : config_entries(c)) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + fmt::format("[{}]\n", sec);
      section = sec;
    }
    out += fmt::format("{} = {}\n", key.substr(dot + 1), value);
  }
  return out;
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t x) { return fmt::format("{:016x}", x); }

// Hash of every setting except the output directory.
inline std::string config_hash(const ExperimentConfig& c) {
  std::string canon;
  for (const auto& [key, value] : config_entries(c))
    if (key != "output.dir") canon += key + "=" + value + "\n";
  return hex64(fnv1a(canon));
}

inline ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParameterError(fmt::format("config: {}", e.message()));
  }
  ExperimentConfig c;
  const auto known = config_entries(c);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ParameterError(fmt::format("config: key '{}' outside a section", section));
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      if (!known.count(full)) throw ParameterError(fmt::format("config: unknown key '{}'", full));
      const std::string raw = detail::trim(value.data());
      using namespace detail;
      if (full == "dataset.n") c.n = static_cast<Eigen::Index>(parse_uint(full, raw));
      else if (full == "dataset.d") c.d = static_cast<Eigen::Index>(parse_uint(full, raw));
      else if (full == "dataset.k") c.k = static_cast<Eigen::Index>(parse_uint(full, raw));
      else if (full == "dataset.seed") c.dataset_seed = parse_uint(full, raw);
      else if (full == "dataset.target_gamma") c.target_gamma = parse_double(full, raw);
      else if (full == "dataset.unit_labels") c.unit_labels = parse_bool(full, raw);
      else if (full == "dataset.labels") {
        if (raw == "realizable") c.labels = LabelModel::realizable;
        else if (raw == "gaussian") c.labels = LabelModel::gaussian;
        else throw ParameterError(fmt::format("{}: expected realizable or gaussian", full));
      } else if (full == "dataset.bundle") c.bundle = raw;
      else if (full == "init.beta") c.beta = parse_double(full, raw);
      else if (full == "init.seed") c.init_seed = parse_uint(full, raw);
      else if (full == "run.kind") c.kind = diffusion_kind_from_string(raw);
      else if (full == "run.sigma") c.sigma = parse_double(full, raw);
      else if (full == "run.sigmas") c.sigmas = parse_list(full, raw);
      else if (full == "run.lp_fractions") c.lp_fractions = parse_list(full, raw);
      else if (full == "run.horizon") c.horizon = parse_double(full, raw);
      else if (full == "run.time_per_epoch") c.time_per_epoch = parse_double(full, raw);
      else if (full == "run.epochs") c.epochs = raw.empty() ? std::nullopt : std::optional<double>(parse_double(full, raw));
      else if (full == "run.dt") c.dt = parse_double(full, raw);
      else if (full == "run.replicas") c.replicas = parse_uint(full, raw);
      else if (full == "run.seed") c.seed = parse_uint(full, raw);
      else if (full == "run.threads") c.threads = static_cast<unsigned>(parse_uint(full, raw));
      else if (full == "run.window") {
        const auto w = parse_list(full, raw);
        if (w.size() != 2) throw ParameterError(fmt::format("{}: expected t0, t1", full));
        c.window = {w[0], w[1]};
      } else if (full == "dpgd.learning_rate") c.dpgd.learning_rate = parse_double(full, raw);
      else if (full == "dpgd.clip_norm") c.dpgd.clip_norm = parse_double(full, raw);
      else if (full == "dpgd.sigma_noise") c.dpgd.sigma_noise = parse_double(full, raw);
      else if (full == "dpgd.steps") c.dpgd.steps = parse_uint(full, raw);
      else if (full == "dpgd.lp_steps") c.dpgd.lp_steps = parse_uint(full, raw);
      else if (full == "dpgd.mode") c.dpgd.mode = diffusion_kind_from_string(raw);
      else if (full == "dpgd.batch_size") c.dpgd.batch_size = parse_uint(full, raw);
      else if (full == "dpgd.adjacency") c.dpgd.adjacency = adjacency_from_string(raw);
      else if (full == "dpgd.delta") c.delta = parse_double(full, raw);
      else if (full == "output.dir") c.output_dir = raw;
    }
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read config {}", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace dpft
