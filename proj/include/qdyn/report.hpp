/* Copyright 2026 The qdyn Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// Text renderings of a QuantReport: the summary table CSV, a JSON dump,
// the long-form layerwise CSV, and SVG line charts drawn from that CSV.
// All writers are pure functions of their inputs so that reruns are
// byte-identical. Formats are documented in docs/FORMAT.md.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "qdyn/analysis.hpp"
#include "qdyn/common.hpp"

namespace qdyn {

inline constexpr std::string_view kTableHeader =
    "Network Architecture,FP32 Acc (%),QUINT8 Acc (%),QMSE,QCE,QKL-Div,Percent Acc Decrease";
inline constexpr std::string_view kLayerwiseHeader = "layer_index,layer_name,metric,trial,value";

// Metric names of the layerwise CSV, in emission order.
inline constexpr std::array<std::string_view, 9> kLayerwiseMetrics = {
    "qmse",         "qce",          "qkl",
    "act_range",    "act_avg_precision",
    "weights_range", "weights_avg_precision",
    "bn_fold_range", "bn_fold_avg_precision"};

inline bool is_layerwise_metric(std::string_view name) {
  return std::find(kLayerwiseMetrics.begin(), kLayerwiseMetrics.end(), name) !=
         kLayerwiseMetrics.end();
}

// printf-style formatting into a std::string (C locale, so output never
// depends on the environment).
template <typename... Args>
std::string format(const char* fmt, Args... args) {
  const int n = std::snprintf(nullptr, 0, fmt, args...);
  std::string out(static_cast<std::size_t>(n), '\0');
  std::snprintf(out.data(), out.size() + 1, fmt, args...);
  return out;
}

// Seventeen significant digits, so the value parses back to the same double.
inline std::string format_number(double v) { return format("%.17g", v); }

inline std::string format_mean_std(const Summary& s) {
  return format("%.6g", s.mean) + " \xC2\xB1 " + format("%.6g", s.std);
}

inline std::string csv_field(std::string_view text) {
  if (text.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(text);
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

// Splits one CSV record (RFC 4180 quoting, no embedded newlines).
inline std::vector<std::string> parse_csv_line(std::string_view line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else if (c != '\r') {
      fields.back() += c;
    }
  }
  if (quoted) fail(ErrorKind::kParse, "unterminated quoted CSV field");
  return fields;
}

// ---------------------------------------------------------------------------
// Summary table.

inline std::string table_row(const QuantReport& r) {
  const ReportAggregate& a = r.aggregate;
  auto optional_cell = [](const std::optional<Summary>& s) {
    return s ? format_mean_std(*s) : std::string("n/a");
  };
  return csv_field(r.network) + "," + optional_cell(a.fp32_accuracy) + "," +
         optional_cell(a.quant_accuracy) + "," + format_mean_std(a.qmse) + "," +
         format_mean_std(a.qce) + "," + format_mean_std(a.qkl) + "," +
         optional_cell(a.percent_decrease);
}

inline std::string table_csv(std::span<const QuantReport> reports) {
  std::string out = std::string(kTableHeader) + "\n";
  for (const QuantReport& r : reports) out += table_row(r) + "\n";
  return out;
}

inline std::string table_csv(const QuantReport& report) {
  return table_csv(std::span<const QuantReport>(&report, 1));
}

// ---------------------------------------------------------------------------
// JSON.

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson summary_json(const Summary& s) { return {{"mean", s.mean}, {"std", s.std}}; }

inline ojson optional_summary_json(const std::optional<Summary>& s) {
  return s ? summary_json(*s) : ojson(nullptr);
}

inline ojson metrics_json(const MetricTriple& m) {
  return {{"qmse", m.qmse}, {"qce", m.qce}, {"qkl", m.qkl}};
}

inline ojson stats_json(const LayerStats& s) {
  return {{"layer", s.layer},
          {"index", s.index},
          {"kind", std::string(stats_kind_name(s.kind))},
          {"range", s.range},
          {"average_precision", s.average_precision},
          {"per_channel_ranges", s.per_channel_ranges}};
}

inline ojson optional_json(const std::optional<double>& v) {
  return v ? ojson(*v) : ojson(nullptr);
}

}  // namespace detail

inline std::string report_json(const QuantReport& r) {
  using detail::ojson;
  ojson j;
  j["network"] = r.network;
  j["config"] = {{"trials", r.config.trials},
                 {"calibration_batch", r.config.batch_size},
                 {"percentile", r.config.percentile},
                 {"seed", r.config.seed},
                 {"weight_mode", std::string(weight_mode_name(r.config.weight_mode))}};
  const ReportAggregate& a = r.aggregate;
  ojson agg;
  agg["fp32_accuracy"] = detail::optional_summary_json(a.fp32_accuracy);
  agg["quint8_accuracy"] = detail::optional_summary_json(a.quant_accuracy);
  agg["qmse"] = detail::summary_json(a.qmse);
  agg["qce"] = detail::summary_json(a.qce);
  agg["qkl"] = detail::summary_json(a.qkl);
  agg["percent_accuracy_decrease"] = detail::optional_summary_json(a.percent_decrease);
  ojson layers = ojson::array();
  for (const LayerSummary& l : a.layers) {
    layers.push_back({{"layer", l.layer},
                      {"index", l.index},
                      {"qmse", detail::summary_json(l.qmse)},
                      {"qce", detail::summary_json(l.qce)},
                      {"qkl", detail::summary_json(l.qkl)}});
  }
  agg["layers"] = std::move(layers);
  j["aggregate"] = std::move(agg);
  ojson weights = ojson::array();
  for (const LayerStats& s : r.weight_stats) weights.push_back(detail::stats_json(s));
  j["weight_stats"] = std::move(weights);
  ojson trials = ojson::array();
  for (const TrialResult& t : r.trials) {
    ojson tj;
    tj["trial"] = t.trial;
    tj["seed"] = t.seed;
    tj["output"] = detail::metrics_json(t.output);
    tj["fp32_accuracy"] = detail::optional_json(t.fp32_accuracy);
    tj["quint8_accuracy"] = detail::optional_json(t.quant_accuracy);
    tj["percent_accuracy_decrease"] = detail::optional_json(t.percent_decrease);
    ojson ranges = ojson::array();
    for (const RangeRecord& rr : t.ranges) {
      const QuantParams p = rr.params();
      ranges.push_back({{"layer", rr.layer},
                        {"min", rr.min},
                        {"max", rr.max},
                        {"scale", p.scale},
                        {"zero_point", p.zero_point}});
    }
    tj["activation_ranges"] = std::move(ranges);
    ojson stats = ojson::array();
    for (const LayerStats& s : t.activation_stats) stats.push_back(detail::stats_json(s));
    tj["activation_stats"] = std::move(stats);
    ojson lm = ojson::array();
    for (const LayerMetrics& m : t.layers) {
      ojson e = detail::metrics_json(m.metrics);
      e["layer"] = m.layer;
      e["index"] = m.index;
      lm.push_back(std::move(e));
    }
    tj["layers"] = std::move(lm);
    trials.push_back(std::move(tj));
  }
  j["trials"] = std::move(trials);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Layerwise long-form CSV.
//
// Activation-side metrics (qmse, qce, qkl, act_*) are indexed by capture
// ordinal; weight-side metrics (weights_*, bn_fold_*) by weighted-layer
// ordinal. Weight statistics do not depend on calibration and repeat
// unchanged for every trial.

inline std::string layerwise_csv(const QuantReport& r) {
  std::ostringstream out;
  out << kLayerwiseHeader << "\n";
  auto row = [&](std::size_t index, std::string_view layer, std::string_view metric,
                 std::size_t trial, double value) {
    out << index << "," << csv_field(layer) << "," << metric << "," << trial << ","
        << format_number(value) << "\n";
  };
  for (const TrialResult& t : r.trials) {
    for (const LayerMetrics& m : t.layers) {
      row(m.index, m.layer, "qmse", t.trial, m.metrics.qmse);
      row(m.index, m.layer, "qce", t.trial, m.metrics.qce);
      row(m.index, m.layer, "qkl", t.trial, m.metrics.qkl);
    }
    for (const LayerStats& s : t.activation_stats) {
      row(s.index, s.layer, "act_range", t.trial, s.range);
      row(s.index, s.layer, "act_avg_precision", t.trial, s.average_precision);
    }
    for (const LayerStats& s : r.weight_stats) {
      const bool folded = s.kind == StatsKind::kBnFoldWeights;
      row(s.index, s.layer, folded ? "bn_fold_range" : "weights_range", t.trial, s.range);
      row(s.index, s.layer, folded ? "bn_fold_avg_precision" : "weights_avg_precision", t.trial,
          s.average_precision);
    }
  }
  return out.str();
}

struct LayerwiseRow {
  std::size_t layer_index = 0;
  std::string layer_name;
  std::string metric;
  std::size_t trial = 0;
  double value = 0.0;
};

inline std::vector<LayerwiseRow> parse_layerwise_csv(std::string_view text) {
  std::vector<LayerwiseRow> rows;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line_no == 1) {
      if (line != kLayerwiseHeader) {
        fail(ErrorKind::kParse, "layerwise CSV header must be '", kLayerwiseHeader, "'");
      }
      continue;
    }
    if (line.empty()) continue;
    const std::vector<std::string> f = parse_csv_line(line);
    if (f.size() != 5) fail(ErrorKind::kParse, "layerwise CSV line ", line_no, " has ", f.size(), " fields");
    LayerwiseRow r;
    try {
      std::size_t used = 0;
      r.layer_index = std::stoul(f[0], &used);
      if (used != f[0].size()) throw std::invalid_argument(f[0]);
      r.trial = std::stoul(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument(f[3]);
      r.value = std::stod(f[4], &used);
      if (used != f[4].size()) throw std::invalid_argument(f[4]);
    } catch (const std::exception&) {
      fail(ErrorKind::kParse, "layerwise CSV line ", line_no, " has a malformed number");
    }
    r.layer_name = f[1];
    r.metric = f[2];
    rows.push_back(std::move(r));
  }
  if (line_no == 0) fail(ErrorKind::kParse, "layerwise CSV is empty");
  return rows;
}

// ---------------------------------------------------------------------------
// SVG plot.

struct PlotPoint {
  std::size_t layer_index = 0;
  double mean = 0.0;
  double std = 0.0;
};

struct PlotSeries {
  std::string label;
  std::vector<PlotPoint> points;  // ascending layer index
};

// Mean and population std across trials, per layer index.
inline PlotSeries layerwise_series(std::string label, std::span<const LayerwiseRow> rows,
                                   std::string_view metric) {
  if (!is_layerwise_metric(metric)) {
    fail(ErrorKind::kUsage, "unknown metric '", metric, "'");
  }
  std::map<std::size_t, std::vector<double>> by_layer;
  for (const LayerwiseRow& r : rows) {
    if (r.metric == metric) by_layer[r.layer_index].push_back(r.value);
  }
  if (by_layer.empty()) {
    fail(ErrorKind::kData, "no rows for metric '", metric, "' in series '", label, "'");
  }
  PlotSeries s;
  s.label = std::move(label);
  for (const auto& [index, values] : by_layer) {
    const Summary sum = summarize(values);
    s.points.push_back({index, sum.mean, sum.std});
  }
  return s;
}

namespace detail {

inline std::string xml_escape(std::string_view text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string coord(double v) { return format("%.2f", v); }

// Step from {1, 2, 5} x 10^k giving at most `max_ticks` intervals.
inline double nice_step(double span, int max_ticks) {
  if (!(span > 0.0)) return 1.0;
  const double raw = span / max_ticks;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * mag >= raw) return m * mag;
  }
  return 10.0 * mag;
}

inline constexpr std::array<std::string_view, 8> kPalette = {
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

}  // namespace detail

inline std::string render_svg(std::span<const PlotSeries> series, std::string_view metric) {
  if (series.empty()) fail(ErrorKind::kUsage, "plot needs at least one series");
  constexpr double kWidth = 800, kHeight = 480;
  constexpr double kLeft = 80, kRight = 200, kTop = 40, kBottom = 60;
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;

  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
  double y_lo = x_lo, y_hi = -x_lo;
  for (const PlotSeries& s : series) {
    for (const PlotPoint& p : s.points) {
      if (!std::isfinite(p.mean) || !std::isfinite(p.std)) {
        fail(ErrorKind::kData, "non-finite value in series '", s.label, "'");
      }
      x_lo = std::min(x_lo, static_cast<double>(p.layer_index));
      x_hi = std::max(x_hi, static_cast<double>(p.layer_index));
      y_lo = std::min(y_lo, p.mean - p.std);
      y_hi = std::max(y_hi, p.mean + p.std);
    }
  }
  if (x_hi == x_lo) {
    x_lo -= 1;
    x_hi += 1;
  }
  if (y_hi == y_lo) {
    const double pad = y_hi == 0.0 ? 1.0 : std::abs(y_hi) * 0.1;
    y_lo -= pad;
    y_hi += pad;
  }
  const double y_step = detail::nice_step(y_hi - y_lo, 6);
  y_lo = std::floor(y_lo / y_step) * y_step;
  y_hi = std::ceil(y_hi / y_step) * y_step;
  const double x_step = std::max(1.0, detail::nice_step(x_hi - x_lo, 10));

  auto sx = [&](double x) { return kLeft + (x - x_lo) / (x_hi - x_lo) * plot_w; };
  auto sy = [&](double y) { return kTop + (y_hi - y) / (y_hi - y_lo) * plot_h; };
  using detail::coord;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" fill=\"white\"/>\n";
  // Grid lines and tick labels.
  const int y_ticks = static_cast<int>(std::lround((y_hi - y_lo) / y_step));
  for (int i = 0; i <= y_ticks; ++i) {
    const double v = y_lo + i * y_step;
    const double y = sy(v);
    svg << "<line x1=\"" << coord(kLeft) << "\" y1=\"" << coord(y) << "\" x2=\""
        << coord(kLeft + plot_w) << "\" y2=\"" << coord(y) << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << coord(kLeft - 6) << "\" y=\"" << coord(y + 4)
        << "\" text-anchor=\"end\">" << format("%.4g", std::abs(v) < y_step * 1e-9 ? 0.0 : v)
        << "</text>\n";
  }
  for (double v = std::ceil(x_lo / x_step) * x_step; v <= x_hi + 1e-9; v += x_step) {
    const double x = sx(v);
    svg << "<line x1=\"" << coord(x) << "\" y1=\"" << coord(kTop + plot_h) << "\" x2=\""
        << coord(x) << "\" y2=\"" << coord(kTop + plot_h + 5) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << coord(x) << "\" y=\"" << coord(kTop + plot_h + 20)
        << "\" text-anchor=\"middle\">" << format("%.0f", v) << "</text>\n";
  }
  svg << "<rect x=\"" << coord(kLeft) << "\" y=\"" << coord(kTop) << "\" width=\""
      << coord(plot_w) << "\" height=\"" << coord(plot_h)
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << coord(kLeft + plot_w / 2) << "\" y=\"" << coord(kHeight - 15)
      << "\" text-anchor=\"middle\">layer index</text>\n";
  svg << "<text x=\"20\" y=\"" << coord(kTop + plot_h / 2)
      << "\" text-anchor=\"middle\" transform=\"rotate(-90 20 " << coord(kTop + plot_h / 2)
      << ")\">" << detail::xml_escape(metric) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const PlotSeries& s = series[i];
    const std::string_view color = detail::kPalette[i % detail::kPalette.size()];
    std::string band, line;
    for (const PlotPoint& p : s.points) {
      band += coord(sx(static_cast<double>(p.layer_index))) + "," + coord(sy(p.mean + p.std)) + " ";
    }
    for (auto it = s.points.rbegin(); it != s.points.rend(); ++it) {
      band += coord(sx(static_cast<double>(it->layer_index))) + "," +
              coord(sy(it->mean - it->std)) + " ";
    }
    for (const PlotPoint& p : s.points) {
      if (!line.empty()) line += " ";
      line += coord(sx(static_cast<double>(p.layer_index))) + "," + coord(sy(p.mean));
    }
    band.pop_back();
    svg << "<polygon points=\"" << band << "\" fill=\"" << color
        << "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
    svg << "<polyline points=\"" << line << "\" fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\"/>\n";
    const double ly = kTop + 10 + 20 * static_cast<double>(i);
    svg << "<line x1=\"" << coord(kLeft + plot_w + 15) << "\" y1=\"" << coord(ly) << "\" x2=\""
        << coord(kLeft + plot_w + 40) << "\" y2=\"" << coord(ly) << "\" stroke=\"" << color
        << "\" stroke-width=\"3\"/>\n";
    svg << "<text x=\"" << coord(kLeft + plot_w + 45) << "\" y=\"" << coord(ly + 4) << "\">"
        << detail::xml_escape(s.label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace qdyn
