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

// Multi-scale distribution metrics: dynamic range and average precision of
// weights / BN-folded weights / activations, histogram-based QCE and
// QKL-Div, QMSE, and the multi-trial quantization experiment.

#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qdyn/calibration.hpp"
#include "qdyn/data.hpp"
#include "qdyn/engine.hpp"
#include "qdyn/quantizer.hpp"

namespace qdyn {

inline constexpr std::size_t kHistogramBins = 256;
inline constexpr double kSmoothing = 1e-10;

enum class StatsKind { kWeights, kBnFoldWeights, kActivations };

inline std::string_view stats_kind_name(StatsKind k) {
  switch (k) {
    case StatsKind::kWeights: return "weights";
    case StatsKind::kBnFoldWeights: return "bn_fold_weights";
    case StatsKind::kActivations: return "activations";
  }
  return "unknown";
}

struct LayerStats {
  std::string layer;
  std::size_t index = 0;  // 1-based ordinal within its kind
  StatsKind kind = StatsKind::kWeights;
  float range = 0.0f;
  std::vector<float> per_channel_ranges;
  float average_precision = 1.0f;
};

// Mean ratio of per-channel range to the whole-tensor range.
inline float average_precision(std::span<const float> per_channel_ranges, float tensor_range) {
  if (!(tensor_range > 0.0f)) {
    fail(ErrorKind::kRange, "average precision needs a positive tensor range, got ", tensor_range);
  }
  if (per_channel_ranges.empty()) fail(ErrorKind::kRange, "average precision needs K >= 1 channels");
  double sum = 0.0;
  for (float r : per_channel_ranges) sum += static_cast<double>(r) / tensor_range;
  return static_cast<float>(sum / static_cast<double>(per_channel_ranges.size()));
}

namespace detail {

// A tensor whose range collapses to a point has every channel equal to it.
inline float precision_or_one(std::span<const float> ranges, float tensor_range) {
  return tensor_range > 0.0f ? average_precision(ranges, tensor_range) : 1.0f;
}

}  // namespace detail

inline LayerStats weight_stats(std::string layer, std::size_t index, const WeightTensor& w,
                               StatsKind kind) {
  const std::size_t channels = w.channels();
  std::vector<float> lo(channels, std::numeric_limits<float>::infinity());
  std::vector<float> hi(channels, -std::numeric_limits<float>::infinity());
  auto v = w.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    lo[i % channels] = std::min(lo[i % channels], v[i]);
    hi[i % channels] = std::max(hi[i % channels], v[i]);
  }
  LayerStats s;
  s.layer = std::move(layer);
  s.index = index;
  s.kind = kind;
  s.range = *std::max_element(hi.begin(), hi.end()) - *std::min_element(lo.begin(), lo.end());
  for (std::size_t c = 0; c < channels; ++c) s.per_channel_ranges.push_back(hi[c] - lo[c]);
  s.average_precision = detail::precision_or_one(s.per_channel_ranges, s.range);
  return s;
}

// Channel windows are clipped into the layer window so that no channel
// range exceeds the tensor range.
inline LayerStats activation_stats(const ActivationRanges& r, std::size_t index) {
  LayerStats s;
  s.layer = r.name;
  s.index = index;
  s.kind = StatsKind::kActivations;
  s.range = r.max - r.min;
  for (const auto& [lo, hi] : r.channels) {
    const float clo = std::clamp(lo, r.min, r.max);
    const float chi = std::clamp(hi, r.min, r.max);
    s.per_channel_ranges.push_back(std::max(0.0f, chi - clo));
  }
  s.average_precision = s.per_channel_ranges.empty()
                            ? 1.0f
                            : detail::precision_or_one(s.per_channel_ranges, s.range);
  return s;
}

// Weights and BN-folded weights of every weighted layer.
inline std::vector<LayerStats> weight_layer_stats(const ModelGraph& model) {
  std::vector<LayerStats> out;
  std::size_t ordinal = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    if (!is_weighted(l.spec)) continue;
    ++ordinal;
    out.push_back(weight_stats(l.name, ordinal, *l.weights, StatsKind::kWeights));
    const bool has_bn = i + 1 < model.layers.size() && model.layers[i + 1].bn &&
                        std::holds_alternative<layer::BatchNorm>(model.layers[i + 1].spec);
    const WeightTensor folded = has_bn ? bn_fold(*l.weights, *model.layers[i + 1].bn, l.bias).weights
                                       : *l.weights;
    out.push_back(weight_stats(l.name, ordinal, folded, StatsKind::kBnFoldWeights));
  }
  return out;
}

inline std::vector<LayerStats> activation_layer_stats(std::span<const ActivationRanges> ranges) {
  std::vector<LayerStats> out;
  for (std::size_t i = 0; i < ranges.size(); ++i) out.push_back(activation_stats(ranges[i], i + 1));
  return out;
}

// Weight, BN-folded weight and activation statistics from an fp32 trace.
inline std::vector<LayerStats> layer_stats(const ModelGraph& model, const CaptureTrace& trace,
                                           double p = kDefaultPercentile) {
  std::vector<LayerStats> out = weight_layer_stats(model);
  if (trace.empty()) return out;
  ActivationObserver observer(model, trace.front().activation.shape().n, p, true);
  observer.observe(trace);
  const std::vector<ActivationRanges> ranges = observer.finish();
  for (LayerStats& s : activation_layer_stats(ranges)) out.push_back(std::move(s));
  return out;
}

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<double> probabilities;

  double bin_width() const { return (hi - lo) / static_cast<double>(probabilities.size()); }
  bool same_edges(const Histogram& o) const {
    return lo == o.lo && hi == o.hi && probabilities.size() == o.probabilities.size();
  }
};

namespace detail {

inline Histogram fill_histogram(std::span<const float> values, double lo, double hi) {
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  std::vector<double> counts(kHistogramBins, 0.0);
  const double width = (hi - lo) / static_cast<double>(kHistogramBins);
  for (float v : values) {
    std::size_t bin = 0;
    if (width > 0.0) {
      const double pos = std::floor((static_cast<double>(v) - lo) / width);
      bin = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(kHistogramBins - 1)));
    }
    counts[bin] += 1.0;
  }
  const double total = static_cast<double>(values.size());
  double norm = 0.0;
  for (double& c : counts) {
    c = c / total + kSmoothing;
    norm += c;
  }
  for (double& c : counts) c /= norm;
  h.probabilities = std::move(counts);
  return h;
}

}  // namespace detail

// 256 uniform bins over the union support of both sample sets, smoothed
// by 1e-10 per bin and renormalized.
inline std::pair<Histogram, Histogram> build_histogram(std::span<const float> reference,
                                                       std::span<const float> quantized) {
  if (reference.empty() || quantized.empty()) {
    fail(ErrorKind::kData, "build_histogram: empty sample set");
  }
  const auto [rlo, rhi] = std::minmax_element(reference.begin(), reference.end());
  const auto [qlo, qhi] = std::minmax_element(quantized.begin(), quantized.end());
  const double lo = std::min(*rlo, *qlo);
  const double hi = std::max(*rhi, *qhi);
  return {detail::fill_histogram(reference, lo, hi), detail::fill_histogram(quantized, lo, hi)};
}

inline double entropy(const Histogram& p) {
  double h = 0.0;
  for (double v : p.probabilities) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

inline void check_edges(const Histogram& p, const Histogram& q) {
  if (!p.same_edges(q)) fail(ErrorKind::kData, "histograms do not share bin edges");
}

inline double qce(const Histogram& p, const Histogram& q) {
  check_edges(p, q);
  double ce = 0.0;
  for (std::size_t i = 0; i < p.probabilities.size(); ++i) {
    if (p.probabilities[i] > 0.0) ce -= p.probabilities[i] * std::log(q.probabilities[i]);
  }
  return ce;
}

inline double qkl(const Histogram& p, const Histogram& q) {
  check_edges(p, q);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.probabilities.size(); ++i) {
    const double pi = p.probabilities[i];
    if (pi > 0.0) kl += pi * std::log(pi / q.probabilities[i]);
  }
  return kl;
}

inline double qmse(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    fail(ErrorKind::kShape, "qmse: element counts differ (", a.size(), " vs ", b.size(), ")");
  }
  if (a.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(a.size());
}

inline double qmse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::kShape, "qmse: shapes differ (", a.shape(), " vs ", b.shape(), ")");
  }
  return qmse(a.values(), b.values());
}

struct MetricTriple {
  double qmse = 0.0;
  double qce = 0.0;
  double qkl = 0.0;
};

inline MetricTriple activation_metrics(const Tensor& fp32, const Tensor& quant) {
  MetricTriple m;
  m.qmse = qmse(fp32, quant);
  const auto [p, q] = build_histogram(fp32.values(), quant.values());
  m.qce = qce(p, q);
  m.qkl = qkl(p, q);
  return m;
}

// Quantized probabilities are floored at the smoothing constant so that a
// class underflowing to zero keeps the cross-entropy finite.
inline MetricTriple output_metrics(const Tensor& fp32_softmax, const Tensor& q_softmax) {
  if (fp32_softmax.shape() != q_softmax.shape()) {
    fail(ErrorKind::kShape, "output_metrics: shapes differ (", fp32_softmax.shape(), " vs ",
         q_softmax.shape(), ")");
  }
  const std::size_t classes = fp32_softmax.shape().c;
  const std::size_t rows = classes == 0 ? 0 : fp32_softmax.size() / classes;
  if (rows == 0) fail(ErrorKind::kShape, "output_metrics: empty output");
  auto p = fp32_softmax.values();
  auto q = q_softmax.values();
  MetricTriple m;
  m.qmse = qmse(p, q);
  for (std::size_t r = 0; r < rows; ++r) {
    double psum = 0.0, qsum = 0.0, ce = 0.0, kl = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double pi = p[r * classes + c];
      const double qi = std::max<double>(q[r * classes + c], kSmoothing);
      psum += pi;
      qsum += q[r * classes + c];
      if (pi > 0.0) {
        ce -= pi * std::log(qi);
        kl += pi * std::log(pi / qi);
      }
    }
    if (std::abs(psum - 1.0) > 1e-4 || std::abs(qsum - 1.0) > 1e-4) {
      fail(ErrorKind::kData, "output_metrics: row ", r, " is not normalized (sums ", psum, ", ",
           qsum, ")");
    }
    m.qce += ce;
    m.qkl += kl;
  }
  m.qce /= static_cast<double>(rows);
  m.qkl /= static_cast<double>(rows);
  return m;
}

// Argmax over classes; ties go to the lowest class index.
inline double accuracy_percent(const Tensor& probabilities, std::span<const std::uint8_t> labels) {
  const std::size_t classes = probabilities.shape().c;
  const std::size_t rows = probabilities.shape().n;
  if (labels.size() != rows) fail(ErrorKind::kData, "label count does not match sample count");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = probabilities.sample(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (best == labels[r]) ++correct;
  }
  return rows == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(rows);
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;
};

// Population standard deviation (zero for a single trial).
inline Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  for (double v : values) s.mean += v;
  s.mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / n);
  return s;
}

struct TrialConfig {
  std::size_t trials = 5;
  std::size_t batch_size = 800;
  double percentile = kDefaultPercentile;
  std::uint64_t seed = 0;
  WeightMode weight_mode = WeightMode::kPerTensor;
  std::size_t chunk = kCalibrationChunk;
};

struct LayerMetrics {
  std::string layer;
  std::size_t index = 0;  // 1-based capture ordinal
  MetricTriple metrics;
};

struct TrialResult {
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  std::vector<RangeRecord> ranges;
  std::vector<LayerStats> activation_stats;
  std::vector<LayerMetrics> layers;
  MetricTriple output;
  std::optional<double> fp32_accuracy;
  std::optional<double> quant_accuracy;
  std::optional<double> percent_decrease;
};

struct LayerSummary {
  std::string layer;
  std::size_t index = 0;
  Summary qmse, qce, qkl;
};

struct ReportAggregate {
  Summary qmse, qce, qkl;
  std::optional<Summary> fp32_accuracy, quant_accuracy, percent_decrease;
  std::vector<LayerSummary> layers;
};

struct QuantReport {
  std::string network;
  TrialConfig config;
  std::vector<LayerStats> weight_stats;
  std::vector<TrialResult> trials;
  ReportAggregate aggregate;
};

inline ReportAggregate aggregate_trials(std::span<const TrialResult> trials) {
  ReportAggregate agg;
  auto collect = [&](auto field) {
    std::vector<double> v;
    for (const TrialResult& t : trials) v.push_back(field(t));
    return summarize(v);
  };
  agg.qmse = collect([](const TrialResult& t) { return t.output.qmse; });
  agg.qce = collect([](const TrialResult& t) { return t.output.qce; });
  agg.qkl = collect([](const TrialResult& t) { return t.output.qkl; });
  auto optional_summary = [&](auto member) -> std::optional<Summary> {
    std::vector<double> v;
    for (const TrialResult& t : trials) {
      if (!(t.*member)) return std::nullopt;
      v.push_back(*(t.*member));
    }
    if (v.empty()) return std::nullopt;
    return summarize(v);
  };
  agg.fp32_accuracy = optional_summary(&TrialResult::fp32_accuracy);
  agg.quant_accuracy = optional_summary(&TrialResult::quant_accuracy);
  agg.percent_decrease = optional_summary(&TrialResult::percent_decrease);
  if (!trials.empty()) {
    for (std::size_t l = 0; l < trials.front().layers.size(); ++l) {
      LayerSummary ls;
      ls.layer = trials.front().layers[l].layer;
      ls.index = trials.front().layers[l].index;
      ls.qmse = collect([l](const TrialResult& t) { return t.layers[l].metrics.qmse; });
      ls.qce = collect([l](const TrialResult& t) { return t.layers[l].metrics.qce; });
      ls.qkl = collect([l](const TrialResult& t) { return t.layers[l].metrics.qkl; });
      agg.layers.push_back(std::move(ls));
    }
  }
  return agg;
}

// Runs `images` through a plan in chunks and concatenates the outputs and
// every capture along the batch axis.
inline ForwardResult forward_batched(const ExecutionPlan& plan, const Tensor& images,
                                     std::size_t chunk) {
  const std::size_t total = images.shape().n;
  std::vector<std::size_t> all(total);
  std::iota(all.begin(), all.end(), 0);
  ForwardResult merged;
  std::vector<std::vector<float>> trace_data;
  std::vector<float> output_data;
  Shape output_shape;
  std::vector<Shape> capture_shapes;
  for (std::size_t start = 0; start < total; start += chunk) {
    const std::size_t end = std::min(total, start + chunk);
    ForwardResult part = run_plan(
        plan, gather_samples(images, std::span<const std::size_t>(all).subspan(start, end - start)),
        true);
    if (start == 0) {
      trace_data.resize(part.trace.size());
      for (const Capture& c : part.trace) {
        merged.trace.push_back({c.name, Tensor()});
        capture_shapes.push_back(c.activation.shape());
      }
      output_shape = part.output.shape();
    }
    for (std::size_t i = 0; i < part.trace.size(); ++i) {
      auto v = part.trace[i].activation.values();
      trace_data[i].insert(trace_data[i].end(), v.begin(), v.end());
    }
    auto ov = part.output.values();
    output_data.insert(output_data.end(), ov.begin(), ov.end());
  }
  for (std::size_t i = 0; i < merged.trace.size(); ++i) {
    Shape s = capture_shapes[i];
    s.n = total;
    merged.trace[i].activation = Tensor(s, std::move(trace_data[i]));
  }
  output_shape.n = total;
  merged.output = Tensor(output_shape, std::move(output_data));
  return merged;
}

// Draws `count` distinct indices from [0, population) with a partial
// Fisher-Yates shuffle.
inline std::vector<std::size_t> sample_without_replacement(std::size_t population,
                                                           std::size_t count, std::uint64_t seed) {
  if (count > population) {
    fail(ErrorKind::kData, "cannot sample ", count, " calibration images from a pool of ",
         population);
  }
  std::vector<std::size_t> idx(population);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(population - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

// Repeated post-training quantization: each trial draws its own
// calibration batch, calibrates activation ranges, then compares the fp32
// and simulated-quint8 paths on the evaluation set.
inline QuantReport run_trials(const ModelGraph& model, const Dataset& calib_pool,
                              const Dataset& eval_set, const TrialConfig& config,
                              std::string network = {}) {
  if (config.trials == 0) fail(ErrorKind::kUsage, "run_trials: at least one trial is required");
  if (config.batch_size == 0) fail(ErrorKind::kUsage, "run_trials: batch size must be positive");
  if (calib_pool.size() < config.batch_size) {
    fail(ErrorKind::kData, "insufficient calibration data: pool has ", calib_pool.size(),
         " images, batch size is ", config.batch_size);
  }
  if (eval_set.size() == 0) fail(ErrorKind::kData, "evaluation set is empty");
  const std::size_t chunk = std::max<std::size_t>(1, config.chunk);

  QuantReport report;
  report.network = network.empty() ? model.architecture : std::move(network);
  report.config = config;
  report.weight_stats = weight_layer_stats(model);

  const ExecutionPlan fp32_plan = make_plan(model, BnMode::kFolded, std::nullopt);
  const ForwardResult reference = forward_batched(fp32_plan, eval_set.images, chunk);
  std::optional<double> fp32_acc;
  if (eval_set.has_labels()) fp32_acc = accuracy_percent(reference.output, eval_set.labels);

  for (std::size_t t = 0; t < config.trials; ++t) {
    TrialResult trial;
    trial.trial = t;
    trial.seed = mix_seed(config.seed, t);
    const std::vector<std::size_t> picks =
        sample_without_replacement(calib_pool.size(), config.batch_size, trial.seed);
    const std::vector<ActivationRanges> observed =
        observe_activations(model, calib_pool.images, picks, config.percentile, true);
    trial.ranges = to_range_records(observed);
    trial.activation_stats = activation_layer_stats(observed);

    const ExecutionPlan quant_plan = make_quant_plan(model, trial.ranges, config.weight_mode);
    const ForwardResult quant = forward_batched(quant_plan, eval_set.images, chunk);
    std::size_t ordinal = 0;
    for (std::size_t i = 0; i < reference.trace.size(); ++i) {
      if (i + 1 == reference.trace.size()) break;  // softmax: reported as output metrics
      trial.layers.push_back({reference.trace[i].name, ++ordinal,
                              activation_metrics(reference.trace[i].activation,
                                                 quant.trace[i].activation)});
    }
    trial.output = output_metrics(reference.output, quant.output);
    if (fp32_acc) {
      trial.fp32_accuracy = fp32_acc;
      trial.quant_accuracy = accuracy_percent(quant.output, eval_set.labels);
      if (*fp32_acc > 0.0) {
        trial.percent_decrease = 100.0 * (*fp32_acc - *trial.quant_accuracy) / *fp32_acc;
      }
    }
    report.trials.push_back(std::move(trial));
  }
  report.aggregate = aggregate_trials(report.trials);
  return report;
}

}  // namespace qdyn
