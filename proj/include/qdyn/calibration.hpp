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

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qdyn/engine.hpp"
#include "qdyn/quantizer.hpp"

namespace qdyn {

inline constexpr double kDefaultPercentile = 0.05;
inline constexpr std::size_t kCalibrationChunk = 32;

// Percentile-clipped range of one capture point, pooled over every sample
// seen, optionally with one range per channel (innermost axis).
struct ActivationRanges {
  std::string name;
  float min = 0.0f;
  float max = 0.0f;
  std::vector<std::pair<float, float>> channels;
};

// Pools capture-point activations across batches. Samples are merged in
// the order they are observed; the result only depends on the multiset.
class ActivationObserver {
 public:
  ActivationObserver(const ModelGraph& model, std::size_t total_samples, double p,
                     bool per_channel)
      : per_channel_(per_channel) {
    if (total_samples == 0) fail(ErrorKind::kData, "calibration needs at least one sample");
    const std::vector<Shape> shapes = model.infer_shapes(1);
    for (const CapturePoint& point : capture_points(model)) {
      if (point.is_softmax) continue;
      const Shape s = shapes[point.capture_layer];
      Slot slot;
      slot.name = point.name;
      slot.channels = s.c;
      slot.whole = TailSelector(total_samples * s.per_sample(), p);
      if (per_channel_) {
        slot.per_channel.assign(s.c, TailSelector(total_samples * s.h * s.w, p));
      }
      slots_.push_back(std::move(slot));
    }
  }

  void observe(const CaptureTrace& trace) {
    std::size_t slot = 0;
    for (const Capture& cap : trace) {
      if (slot == slots_.size() || cap.name != slots_[slot].name) continue;
      Slot& s = slots_[slot++];
      auto values = cap.activation.values();
      s.whole.push(values);
      if (per_channel_) {
        for (std::size_t i = 0; i < values.size(); ++i) s.per_channel[i % s.channels].push(values[i]);
      }
    }
    if (slot != slots_.size()) fail(ErrorKind::kData, "capture trace does not cover every layer");
  }

  std::vector<ActivationRanges> finish() {
    std::vector<ActivationRanges> out;
    out.reserve(slots_.size());
    for (Slot& s : slots_) {
      ActivationRanges r;
      r.name = s.name;
      std::tie(r.min, r.max) = s.whole.result();
      for (TailSelector& c : s.per_channel) r.channels.push_back(c.result());
      out.push_back(std::move(r));
    }
    return out;
  }

 private:
  struct Slot {
    std::string name;
    std::size_t channels = 0;
    TailSelector whole;
    std::vector<TailSelector> per_channel;
  };

  bool per_channel_;
  std::vector<Slot> slots_;
};

inline std::vector<RangeRecord> to_range_records(std::span<const ActivationRanges> ranges) {
  std::vector<RangeRecord> out;
  out.reserve(ranges.size());
  for (const ActivationRanges& r : ranges) {
    out.push_back(make_range_record(r.name, r.min, r.max, RangeSource::kActivations));
  }
  return out;
}

// Runs the BN-folded fp32 path over `indices` of `images` in fixed-size
// chunks and returns the pooled percentile ranges.
inline std::vector<ActivationRanges> observe_activations(const ModelGraph& model,
                                                         const Tensor& images,
                                                         std::span<const std::size_t> indices,
                                                         double p, bool per_channel) {
  ActivationObserver observer(model, indices.size(), p, per_channel);
  const ExecutionPlan plan = make_plan(model, BnMode::kFolded, std::nullopt);
  for (std::size_t start = 0; start < indices.size(); start += kCalibrationChunk) {
    const std::size_t end = std::min(indices.size(), start + kCalibrationChunk);
    const Tensor chunk = gather_samples(images, indices.subspan(start, end - start));
    observer.observe(run_plan(plan, chunk, true).trace);
  }
  return observer.finish();
}

inline std::vector<RangeRecord> calibrate(const ModelGraph& model, std::span<const Tensor> batches,
                                          double p = kDefaultPercentile) {
  if (batches.empty()) fail(ErrorKind::kData, "calibrate: no calibration batches");
  std::size_t total = 0;
  for (const Tensor& b : batches) total += b.shape().n;
  ActivationObserver observer(model, total, p, false);
  const ExecutionPlan plan = make_plan(model, BnMode::kFolded, std::nullopt);
  for (const Tensor& batch : batches) observer.observe(run_plan(plan, batch, true).trace);
  const std::vector<ActivationRanges> ranges = observer.finish();
  return to_range_records(ranges);
}

}  // namespace qdyn
