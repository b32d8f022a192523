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

// Run-directory artifacts: CSV tables, SVG line charts, and the manifest.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "json.hpp"

#include "dpft/bundle.hpp"
#include "dpft/config.hpp"
#include "dpft/error.hpp"

namespace dpft {

inline constexpr const char* kVersion = "0.1.0";

// Header plus rows of plain cells (no commas, quotes, or newlines).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  bool operator==(const CsvTable&) const = default;

  void add_row(std::vector<std::string> row) {
    if (row.size() != header.size())
      throw DimensionError(fmt::format("row has {} cells, header has {}", row.size(), header.size()));
    rows.push_back(std::move(row));
  }
};

inline std::string cell(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  return fmt::format("{:.17g}", x);
}

inline std::string cell(std::size_t x) { return std::to_string(x); }
inline std::string cell(bool b) { return b ? "1" : "0"; }

inline std::string emit_csv(const CsvTable& t) {
  auto check = [](const std::string& c) {
    if (c.find_first_of(",\"\r\n") != std::string::npos)
      throw ParameterError(fmt::format("CSV cell '{}' needs quoting, which is not supported", c));
  };
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      check(cells[i]);
      out += (i ? "," : "") + cells[i];
    }
    out += '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  return out;
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string lineText;
  bool first = true;
  while (std::getline(in, lineText)) {
    if (!lineText.empty() && lineText.back() == '\r') lineText.pop_back();
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto comma = lineText.find(',', start);
      cells.push_back(lineText.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      t.add_row(std::move(cells));
    }
  }
  if (first) throw ParameterError("empty CSV");
  return t;
}

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
  std::vector<double> err;  // optional half-widths of the error bars
};

struct Plot {
  std::string title, xlabel, ylabel;
  std::vector<PlotSeries> series;
};

inline CsvTable plot_table(const Plot& p) {
  CsvTable t{{"series", "x", "y", "err"}, {}};
  for (const auto& s : p.series)
    for (std::size_t i = 0; i < s.x.size(); ++i)
      t.add_row({s.name, cell(s.x[i]), cell(s.y[i]), s.err.empty() ? "0" : cell(s.err[i])});
  return t;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

// Standalone SVG line chart; the output depends only on the input values.
inline std::string render_svg(const Plot& p) {
  if (p.series.empty()) throw ParameterError("plot needs at least one series");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : p.series) {
    if (s.x.empty() || s.x.size() != s.y.size()) throw ParameterError(fmt::format("series '{}' is empty or ragged", s.name));
    if (!s.err.empty() && s.err.size() != s.x.size()) throw ParameterError(fmt::format("series '{}' has ragged errors", s.name));
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      const double e = s.err.empty() || !std::isfinite(s.err[i]) ? 0.0 : s.err[i];
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i] - e);
      y1 = std::max(y1, s.y[i] + e);
    }
  }
  if (!std::isfinite(x0)) throw ParameterError("plot has no finite points");
  if (x1 == x0) { x0 -= 0.5; x1 += 0.5; }
  if (y1 == y0) { y0 -= 0.5; y1 += 0.5; }
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;

  constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return T + (y1 - y) / (y1 - y0) * ph; };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

  std::string o;
  o += fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" viewBox=\"0 0 {:.0f} {:.0f}\">\n", W, H, W, H);
  o += fmt::format("<rect width=\"{:.0f}\" height=\"{:.0f}\" fill=\"white\"/>\n", W, H);
  o += fmt::format("<text x=\"{:.1f}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
                   L + pw / 2, xml_escape(p.title));
  o += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n", L, T + ph, L + pw);
  o += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n", L, T, T + ph);
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    o += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n", sx(xv), T + ph, T + ph + 5);
    o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.3g}</text>\n",
                     sx(xv), T + ph + 18, xv);
    o += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"black\"/>\n", L - 5, sy(yv), L);
    o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3g}</text>\n",
                     L - 8, sy(yv) + 4, yv);
  }
  o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
                   L + pw / 2, H - 10, xml_escape(p.xlabel));
  o += fmt::format("<text x=\"16\" y=\"{0:.1f}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0:.1f})\">{1}</text>\n",
                   T + ph / 2, xml_escape(p.ylabel));
  for (std::size_t k = 0; k < p.series.size(); ++k) {
    const auto& s = p.series[k];
    const char* color = palette[k % 8];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      pts += fmt::format("{}{:.2f},{:.2f}", pts.empty() ? "" : " ", sx(s.x[i]), sy(s.y[i]));
    }
    o += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n", color, pts);
    if (!s.err.empty())
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]) || !(s.err[i] > 0.0)) continue;
        o += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{2:.2f}\" stroke=\"{3}\"/>\n", sx(s.x[i]),
                         sy(s.y[i] - s.err[i]), sy(s.y[i] + s.err[i]), color);
      }
    const double ly = T + 14.0 + 18.0 * static_cast<double>(k);
    o += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{2:.1f}\" y2=\"{1:.1f}\" stroke=\"{3}\" stroke-width=\"2\"/>\n",
                     L + pw + 12, ly, L + pw + 32, color);
    o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n", L + pw + 38,
                     ly + 4, xml_escape(s.name));
  }
  o += "</svg>\n";
  return o;
}

// Writes <path>.svg and the companion <path>.csv (same stem).
inline void emit_plot(const Plot& p, const std::filesystem::path& svg_path) {
  const std::string svg = render_svg(p);
  auto csv_path = svg_path;
  csv_path.replace_extension(".csv");
  write_text(svg_path, svg);
  write_text(csv_path, emit_csv(plot_table(p)));
}

// Every file a command writes, with sizes and content hashes, plus the
// config hash and seed. No timestamps or absolute paths.
class RunDirectory {
 public:
  RunDirectory(std::filesystem::path root, std::string command, const ExperimentConfig& cfg)
      : root_(std::move(root)), command_(std::move(command)), hash_(config_hash(cfg)), seed_(cfg.seed) {}

  const std::filesystem::path& root() const { return root_; }

  void write(const std::string& name, const std::string& content) {
    write_text(root_ / name, content);
    files_.push_back({name, content.size(), hex64(fnv1a(content))});
  }

  void write_plot(const std::string& stem, const Plot& p) {
    write(stem + ".svg", render_svg(p));
    write(stem + ".csv", emit_csv(plot_table(p)));
  }

  nlohmann::json manifest() const {
    nlohmann::json j;
    j["tool"] = "dpft-lab";
    j["command"] = command_;
    j["config_hash"] = hash_;
    j["seed"] = seed_;
    j["versions"] = {{"dpft", kVersion},
                     {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION)},
                     {"fmt", FMT_VERSION},
                     {"nlohmann_json", fmt::format("{}.{}.{}", NLOHMANN_JSON_VERSION_MAJOR, NLOHMANN_JSON_VERSION_MINOR,
                                                   NLOHMANN_JSON_VERSION_PATCH)},
                     {"compiler", __VERSION__}};
    nlohmann::json files = nlohmann::json::array();
    for (const auto& f : files_) files.push_back({{"name", f.name}, {"bytes", f.bytes}, {"fnv1a", f.hash}});
    j["files"] = files;
    return j;
  }

  void finish() { write_text(root_ / "manifest.json", manifest().dump(2) + "\n"); }

 private:
  struct Entry {
    std::string name;
    std::size_t bytes;
    std::string hash;
  };
  std::filesystem::path root_;
  std::string command_;
  std::string hash_;
  std::uint64_t seed_;
  std::vector<Entry> files_;
};

}  // namespace dpft
