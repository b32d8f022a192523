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

// JSON bundle holding a dataset and, optionally, pretrained features and a
// model state. Matrices are stored row-major as {"rows", "cols", "data"}.
//
//   {
//     "format": "dpft-bundle", "version": 1,
//     "header": {"n": 8, "d": 4, "k": 3, "seed": 7, "unit_labels": true},
//     "X": {...}, "Y": [...],
//     "B0": {...},              optional
//     "model": {"v": [...], "B": {...}}    optional
//   }

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "json.hpp"

#include "dpft/core.hpp"

namespace dpft {

using json = nlohmann::json;

inline json matrix_to_json(const Matrix& m) {
  json data = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

inline Matrix matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw DimensionError(fmt::format("matrix payload has {} values, expected {}x{}", data.size(), rows, cols));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j2 = 0; j2 < cols; ++j2) m(i, j2) = data[static_cast<std::size_t>(i * cols + j2)].get<double>();
  return m;
}

inline json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Vector vector_from_json(const json& j) {
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

struct Bundle {
  Dataset dataset;
  std::uint64_t seed = 0;
  std::optional<Matrix> features;
  std::optional<TwoLayerModel> model;
};

inline json bundle_to_json(const Bundle& b) {
  json header{{"n", b.dataset.n()}, {"d", b.dataset.d()}, {"seed", b.seed}, {"unit_labels", b.dataset.unit_labels()}};
  if (b.features) header["k"] = b.features->rows();
  else if (b.model) header["k"] = b.model->k();
  json out{{"format", "dpft-bundle"}, {"version", 1}, {"header", header},
           {"X", matrix_to_json(b.dataset.X())}, {"Y", vector_to_json(b.dataset.Y())}};
  if (b.features) out["B0"] = matrix_to_json(*b.features);
  if (b.model) out["model"] = json{{"v", vector_to_json(b.model->v())}, {"B", matrix_to_json(b.model->B())}};
  return out;
}

inline Bundle bundle_from_json(const json& j) {
  if (j.value("format", std::string{}) != "dpft-bundle") throw IoError("not a dpft-bundle document");
  const auto& header = j.at("header");
  Dataset ds(matrix_from_json(j.at("X")), vector_from_json(j.at("Y")), header.value("unit_labels", false));
  if (ds.n() != header.at("n").get<Eigen::Index>() || ds.d() != header.at("d").get<Eigen::Index>())
    throw DimensionError("bundle header disagrees with matrix shapes");
  Bundle b{std::move(ds), header.value("seed", std::uint64_t{0}), std::nullopt, std::nullopt};
  if (j.contains("B0")) b.features = matrix_from_json(j.at("B0"));
  if (j.contains("model")) {
    const auto& m = j.at("model");
    b.model = TwoLayerModel(vector_from_json(m.at("v")), matrix_from_json(m.at("B")));
  }
  return b;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot open {} for writing", path.string()));
  out << text;
  if (!out) throw IoError(fmt::format("write to {} failed", path.string()));
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_bundle(const Bundle& b, const std::filesystem::path& path) {
  write_text(path, bundle_to_json(b).dump(2) + "\n");
}

inline Bundle load_bundle(const std::filesystem::path& path) { return bundle_from_json(json::parse(read_text(path))); }

// Row-major CSV, 17 significant digits.
inline std::string matrix_to_csv(const Matrix& m) {
  std::string out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += fmt::format("{:.17g}", m(i, j));
    }
    out += '\n';
  }
  return out;
}

}  // namespace dpft
