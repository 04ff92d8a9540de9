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

// Affine uint8 quantization (real = scale * (q - zero_point)), range
// calibration helpers and batch-norm folding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qdyn/common.hpp"
#include "qdyn/model.hpp"
#include "qdyn/tensor.hpp"

namespace qdyn {

inline constexpr int kQuantMin = 0;
inline constexpr int kQuantMax = 255;
inline constexpr float kDegenerateRangePad = 1e-6f;

struct QuantParams {
  static constexpr int num_bits = 8;

  float scale = 1.0f;
  std::int32_t zero_point = 0;

  float nudged_min() const {
    return static_cast<float>(static_cast<double>(scale) * (kQuantMin - zero_point));
  }
  float nudged_max() const {
    return static_cast<float>(static_cast<double>(scale) * (kQuantMax - zero_point));
  }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

// Widens a raw [min, max] so that it is non-degenerate and contains zero.
inline std::pair<float, float> widen_range(float min, float max) {
  if (!std::isfinite(min) || !std::isfinite(max)) {
    fail(ErrorKind::kRange, "non-finite quantization range [", min, ", ", max, "]");
  }
  if (min > max) fail(ErrorKind::kRange, "inverted quantization range [", min, ", ", max, "]");
  if (min == max) {
    min -= kDegenerateRangePad;
    max += kDegenerateRangePad;
  }
  return {std::min(min, 0.0f), std::max(max, 0.0f)};
}

inline QuantParams quant_params_from_range(float min, float max) {
  const auto [lo, hi] = widen_range(min, max);
  const double scale = (static_cast<double>(hi) - static_cast<double>(lo)) / (kQuantMax - kQuantMin);
  QuantParams p;
  p.scale = static_cast<float>(scale);
  // From the exact range ratio, not the float-rounded scale, so that ties
  // such as (-1, 1) -> 127.5 round as the formula intends.
  const double zero_from_min =
      kQuantMin - static_cast<double>(lo) * (kQuantMax - kQuantMin) /
                      (static_cast<double>(hi) - static_cast<double>(lo));
  p.zero_point = static_cast<std::int32_t>(
      std::clamp(std::round(zero_from_min), static_cast<double>(kQuantMin),
                 static_cast<double>(kQuantMax)));
  return p;
}

// Round half away from zero, saturating to [0, 255].
inline std::uint8_t quantize_value(float x, const QuantParams& p) {
  const double q = std::round(static_cast<double>(x) / p.scale) + p.zero_point;
  return static_cast<std::uint8_t>(std::clamp(q, static_cast<double>(kQuantMin),
                                              static_cast<double>(kQuantMax)));
}

inline float dequantize_value(std::uint8_t q, const QuantParams& p) {
  return static_cast<float>(static_cast<double>(p.scale) *
                            (static_cast<std::int32_t>(q) - p.zero_point));
}

inline float fake_quantize_value(float x, const QuantParams& p) {
  return dequantize_value(quantize_value(x, p), p);
}

// Quantized payload. `params` holds one entry (per-tensor) or one entry per
// channel of the innermost axis (per-channel).
struct QTensor {
  std::vector<std::size_t> dims;
  std::optional<WeightLayout> layout;  // set for quantized weights
  std::vector<std::uint8_t> data;
  std::vector<QuantParams> params;

  bool per_channel() const { return params.size() > 1; }
  const QuantParams& params_for(std::size_t flat_index) const {
    return params.size() == 1 ? params[0] : params[flat_index % params.size()];
  }
};

inline QTensor quantize(const Tensor& x, const QuantParams& p) {
  QTensor q;
  const Shape s = x.shape();
  q.dims = {s.n, s.h, s.w, s.c};
  q.params = {p};
  q.data.reserve(x.size());
  for (float v : x.values()) q.data.push_back(quantize_value(v, p));
  return q;
}

inline Tensor dequantize(const QTensor& q) {
  if (q.dims.size() != 4 || q.layout) {
    fail(ErrorKind::kShape, "dequantize: expected a rank-4 activation payload");
  }
  Tensor out(Shape{q.dims[0], q.dims[1], q.dims[2], q.dims[3]});
  auto dst = out.values();
  if (dst.size() != q.data.size()) fail(ErrorKind::kShape, "dequantize: payload length mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = dequantize_value(q.data[i], q.params_for(i));
  return out;
}

inline Tensor fake_quantize(Tensor x, const QuantParams& p) {
  for (float& v : x.values()) v = fake_quantize_value(v, p);
  return x;
}

// Nearest-rank percentile clipping: p of the mass is clipped from each tail.
struct PercentileRanks {
  std::size_t low = 0;
  std::size_t high = 0;
};

inline PercentileRanks percentile_ranks(std::size_t count, double p) {
  if (count == 0) fail(ErrorKind::kData, "percentile range of an empty sample set");
  if (!(p >= 0.0 && p < 0.5)) fail(ErrorKind::kRange, "percentile must lie in [0, 0.5), got ", p);
  const double last = static_cast<double>(count - 1);
  PercentileRanks r;
  r.low = static_cast<std::size_t>(std::floor(p * last + 1e-9));
  r.high = static_cast<std::size_t>(std::ceil((1.0 - p) * last - 1e-9));
  r.high = std::min(r.high, count - 1);
  return r;
}

inline std::pair<float, float> percentile_range(std::span<const float> samples, double p) {
  const PercentileRanks r = percentile_ranks(samples.size(), p);
  std::vector<float> sorted(samples.begin(), samples.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(r.low),
                   sorted.end());
  const float lo = sorted[r.low];
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(r.high),
                   sorted.end());
  return {lo, sorted[r.high]};
}

// Streaming form of percentile_range for a sample count known up front.
// Keeps only the low.rank+1 smallest and count-high.rank largest values.
class TailSelector {
 public:
  TailSelector() = default;
  TailSelector(std::size_t count, double p) : expected_(count) {
    const PercentileRanks r = percentile_ranks(count, p);
    keep_low_ = r.low + 1;
    keep_high_ = count - r.high;
  }

  void push(float v) {
    ++seen_;
    if (low_.size() < keep_low_ || v < low_cut_) {
      low_.push_back(v);
      if (low_.size() >= 2 * keep_low_ + 64) compact_low();
    }
    if (high_.size() < keep_high_ || v > high_cut_) {
      high_.push_back(v);
      if (high_.size() >= 2 * keep_high_ + 64) compact_high();
    }
  }

  void push(std::span<const float> values) {
    for (float v : values) push(v);
  }

  std::size_t seen() const { return seen_; }

  std::pair<float, float> result() {
    if (seen_ != expected_) {
      fail(ErrorKind::kData, "percentile accumulator saw ", seen_, " samples, expected ",
           expected_);
    }
    compact_low();
    compact_high();
    return {low_cut_, high_cut_};
  }

 private:
  // After compaction low_ holds exactly the keep_low_ smallest values seen
  // so far and low_cut_ is the largest of them.
  void compact_low() {
    if (low_.size() < keep_low_) return;
    std::nth_element(low_.begin(), low_.begin() + static_cast<std::ptrdiff_t>(keep_low_ - 1),
                     low_.end());
    low_.resize(keep_low_);
    low_cut_ = *std::max_element(low_.begin(), low_.end());
  }

  void compact_high() {
    if (high_.size() < keep_high_) return;
    std::nth_element(high_.begin(), high_.begin() + static_cast<std::ptrdiff_t>(keep_high_ - 1),
                     high_.end(), std::greater<float>());
    high_.resize(keep_high_);
    high_cut_ = *std::min_element(high_.begin(), high_.end());
  }

  std::size_t expected_ = 0;
  std::size_t seen_ = 0;
  std::size_t keep_low_ = 1;
  std::size_t keep_high_ = 1;
  std::vector<float> low_;
  std::vector<float> high_;
  float low_cut_ = std::numeric_limits<float>::infinity();
  float high_cut_ = -std::numeric_limits<float>::infinity();
};

enum class RangeSource { kWeights, kBnFoldWeights, kActivations };

inline std::string_view range_source_name(RangeSource s) {
  switch (s) {
    case RangeSource::kWeights: return "weights";
    case RangeSource::kBnFoldWeights: return "bn_fold_weights";
    case RangeSource::kActivations: return "activations";
  }
  return "unknown";
}

// Calibrated range; always contains zero and is non-degenerate.
struct RangeRecord {
  std::string layer;
  float min = 0.0f;
  float max = 0.0f;
  RangeSource source = RangeSource::kActivations;

  QuantParams params() const { return quant_params_from_range(min, max); }

  friend bool operator==(const RangeRecord&, const RangeRecord&) = default;
};

inline RangeRecord make_range_record(std::string layer, float min, float max, RangeSource source) {
  const auto [lo, hi] = widen_range(min, max);
  return RangeRecord{std::move(layer), lo, hi, source};
}

struct FoldedWeights {
  WeightTensor weights;
  std::vector<float> bias;
};

// w_fold = gamma * w / sqrt(var + eps) per channel; the bias absorbs the
// shift: b_fold = beta + gamma * (b - mean) / sqrt(var + eps).
inline FoldedWeights bn_fold(const WeightTensor& w, const BatchNormParams& bn,
                             std::span<const float> bias = {}) {
  const std::size_t channels = w.channels();
  if (bn.channels() != channels || bn.moving_mean.size() != channels ||
      bn.moving_var.size() != channels || (bn.has_gamma() && bn.gamma.size() != channels)) {
    fail(ErrorKind::kShape, "bn_fold: batch norm has ", bn.channels(), " channels, weights have ",
         channels);
  }
  if (!bias.empty() && bias.size() != channels) {
    fail(ErrorKind::kShape, "bn_fold: bias length ", bias.size(), " != ", channels);
  }
  if (!(bn.epsilon > 0.0f)) fail(ErrorKind::kRange, "bn_fold: epsilon must be positive");
  std::vector<float> factor(channels);
  FoldedWeights out{w, std::vector<float>(channels)};
  for (std::size_t c = 0; c < channels; ++c) {
    if (!(bn.moving_var[c] >= 0.0f)) {
      fail(ErrorKind::kRange, "bn_fold: negative moving variance ", bn.moving_var[c],
           " at channel ", c);
    }
    const float gamma = bn.has_gamma() ? bn.gamma[c] : 1.0f;
    factor[c] = gamma / std::sqrt(bn.moving_var[c] + bn.epsilon);
    const float b = bias.empty() ? 0.0f : bias[c];
    out.bias[c] = bn.beta[c] + factor[c] * (b - bn.moving_mean[c]);
  }
  auto v = out.weights.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= factor[i % channels];
  return out;
}

namespace detail {

inline QTensor quantize_weights(const WeightTensor& w, std::vector<QuantParams> params) {
  QTensor q;
  q.dims = w.dims();
  q.layout = w.layout();
  q.params = std::move(params);
  q.data.reserve(w.size());
  auto v = w.values();
  for (std::size_t i = 0; i < v.size(); ++i) q.data.push_back(quantize_value(v[i], q.params_for(i)));
  return q;
}

}  // namespace detail

// Exact min/max over the whole tensor; weights are never clipped.
inline QTensor quantize_weights_per_tensor(const WeightTensor& w) {
  if (w.size() == 0) fail(ErrorKind::kShape, "cannot quantize empty weights");
  const auto [lo, hi] = std::minmax_element(w.values().begin(), w.values().end());
  return detail::quantize_weights(w, {quant_params_from_range(*lo, *hi)});
}

inline QTensor quantize_weights_per_channel(const WeightTensor& w) {
  const std::size_t channels = w.channels();
  if (w.size() == 0 || channels == 0) fail(ErrorKind::kShape, "cannot quantize empty weights");
  std::vector<float> lo(channels, std::numeric_limits<float>::infinity());
  std::vector<float> hi(channels, -std::numeric_limits<float>::infinity());
  auto v = w.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    lo[i % channels] = std::min(lo[i % channels], v[i]);
    hi[i % channels] = std::max(hi[i % channels], v[i]);
  }
  std::vector<QuantParams> params;
  params.reserve(channels);
  for (std::size_t c = 0; c < channels; ++c) params.push_back(quant_params_from_range(lo[c], hi[c]));
  return detail::quantize_weights(w, std::move(params));
}

inline WeightTensor dequantize_weights(const QTensor& q) {
  if (!q.layout) fail(ErrorKind::kShape, "dequantize_weights: payload carries no weight layout");
  std::vector<float> values(q.data.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = dequantize_value(q.data[i], q.params_for(i));
  }
  return WeightTensor(*q.layout, q.dims, std::move(values));
}

enum class WeightMode { kPerTensor, kPerChannel };

inline std::string_view weight_mode_name(WeightMode m) {
  return m == WeightMode::kPerTensor ? "per_tensor" : "per_channel";
}

inline WeightMode parse_weight_mode(std::string_view name) {
  if (name == "per_tensor") return WeightMode::kPerTensor;
  if (name == "per_channel") return WeightMode::kPerChannel;
  fail(ErrorKind::kUsage, "unknown weight mode '", name, "' (expected per_tensor or per_channel)");
}

inline WeightTensor fake_quantize_weights(const WeightTensor& w, WeightMode mode) {
  return dequantize_weights(mode == WeightMode::kPerTensor ? quantize_weights_per_tensor(w)
                                                           : quantize_weights_per_channel(w));
}

}  // namespace qdyn
