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

// Reference fp32 and simulated-quint8 forward passes over a ModelGraph.
//
// Capture points are the outputs of each conv / depthwise / dense / add
// unit after its trailing BatchNorm and ReLU, plus the final softmax. The
// quantized path fake-quantizes BN-folded weights and every capture-point
// activation; everything in between runs in fp32.

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "qdyn/kernels.hpp"
#include "qdyn/model.hpp"
#include "qdyn/quantizer.hpp"
#include "qdyn/tensor.hpp"

namespace qdyn {

struct CapturePoint {
  std::string name;
  std::size_t unit_layer = 0;     // conv/depthwise/dense/add that opens the unit
  std::size_t capture_layer = 0;  // last layer of the unit; its output is captured
  bool is_softmax = false;
};

inline std::vector<CapturePoint> capture_points(const ModelGraph& model) {
  std::vector<CapturePoint> points;
  const auto& layers = model.layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& spec = layers[i].spec;
    if (std::holds_alternative<layer::Softmax>(spec)) {
      points.push_back({layers[i].name, i, i, true});
      continue;
    }
    if (!is_weighted(spec) && !std::holds_alternative<layer::Add>(spec)) continue;
    std::size_t end = i;
    auto absorbs = [&](std::size_t j, auto tag) {
      return j < layers.size() && !layers[j].input_from &&
             std::holds_alternative<decltype(tag)>(layers[j].spec);
    };
    if (absorbs(end + 1, layer::BatchNorm{})) ++end;
    if (absorbs(end + 1, layer::ReLU{})) ++end;
    points.push_back({layers[i].name, i, end, false});
  }
  return points;
}

struct Capture {
  std::string name;
  Tensor activation;
};

using CaptureTrace = std::vector<Capture>;

struct ForwardResult {
  Tensor output;  // softmax probabilities
  CaptureTrace trace;
};

enum class BnMode { kFolded, kMovingStats };

// Effective per-layer weights for one execution path.
struct ExecutionPlan {
  const ModelGraph* model = nullptr;
  std::vector<std::optional<WeightTensor>> weights;
  std::vector<std::vector<float>> bias;
  std::vector<bool> skip_bn;  // BN absorbed into the preceding layer
  std::vector<CapturePoint> points;
  std::vector<int> capture_at;  // layer -> index into points, -1 if none
  std::vector<std::optional<QuantParams>> activation_params;  // per capture point
};

inline ExecutionPlan make_plan(const ModelGraph& model, BnMode bn_mode,
                               std::optional<WeightMode> weight_mode) {
  model.infer_shapes(1);
  ExecutionPlan plan;
  plan.model = &model;
  const std::size_t count = model.layers.size();
  plan.weights.resize(count);
  plan.bias.resize(count);
  plan.skip_bn.assign(count, false);
  for (std::size_t i = 0; i < count; ++i) {
    const Layer& l = model.layers[i];
    if (!is_weighted(l.spec)) continue;
    WeightTensor w = *l.weights;
    std::vector<float> b = l.bias;
    const bool next_is_bn = i + 1 < count && model.layers[i + 1].bn &&
                            std::holds_alternative<layer::BatchNorm>(model.layers[i + 1].spec);
    if (next_is_bn && (bn_mode == BnMode::kFolded || weight_mode)) {
      FoldedWeights folded = bn_fold(w, *model.layers[i + 1].bn, b);
      w = std::move(folded.weights);
      b = std::move(folded.bias);
      plan.skip_bn[i + 1] = true;
    }
    if (weight_mode) w = fake_quantize_weights(w, *weight_mode);
    plan.weights[i] = std::move(w);
    plan.bias[i] = std::move(b);
  }
  plan.points = capture_points(model);
  plan.capture_at.assign(count, -1);
  for (std::size_t p = 0; p < plan.points.size(); ++p) {
    plan.capture_at[plan.points[p].capture_layer] = static_cast<int>(p);
  }
  plan.activation_params.resize(plan.points.size());
  return plan;
}

inline std::vector<std::size_t> retained_layers(const ModelGraph& model) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (model.layers[i].input_from) keep.push_back(*model.layers[i].input_from);
    if (const auto* a = std::get_if<layer::Add>(&model.layers[i].spec)) keep.push_back(a->skip_from);
  }
  return keep;
}

inline ForwardResult run_plan(const ExecutionPlan& plan, const Tensor& input, bool capture) {
  const ModelGraph& model = *plan.model;
  const Shape expect = model.input_shape;
  const Shape got = input.shape();
  if (got.h != expect.h || got.w != expect.w || got.c != expect.c) {
    fail(ErrorKind::kShape, "input shape ", got, " does not match model input ", expect.h, "x",
         expect.w, "x", expect.c);
  }
  const std::vector<std::size_t> keep = retained_layers(model);
  std::map<std::size_t, Tensor> retained;
  ForwardResult result;
  Tensor current = input;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    if (l.input_from) current = retained.at(*l.input_from);
    current = std::visit(
        [&](const auto& spec) -> Tensor {
          using T = std::decay_t<decltype(spec)>;
          if constexpr (std::is_same_v<T, layer::Conv2D>) {
            return conv2d(current, *plan.weights[i], plan.bias[i], spec.stride, spec.padding);
          } else if constexpr (std::is_same_v<T, layer::DepthwiseConv2D>) {
            return depthwise_conv2d(current, *plan.weights[i], plan.bias[i], spec.stride,
                                    spec.padding);
          } else if constexpr (std::is_same_v<T, layer::Dense>) {
            return dense(current, *plan.weights[i], plan.bias[i]);
          } else if constexpr (std::is_same_v<T, layer::BatchNorm>) {
            if (plan.skip_bn[i]) return std::move(current);
            const BatchNormParams& bn = *l.bn;
            return batch_norm(std::move(current), bn.gamma, bn.beta, bn.moving_mean,
                              bn.moving_var, bn.epsilon);
          } else if constexpr (std::is_same_v<T, layer::ReLU>) {
            return relu(std::move(current));
          } else if constexpr (std::is_same_v<T, layer::MaxPool>) {
            return maxpool(current, spec.k, spec.stride);
          } else if constexpr (std::is_same_v<T, layer::GlobalAvgPool>) {
            return global_avg_pool(current);
          } else if constexpr (std::is_same_v<T, layer::Flatten>) {
            return flatten(std::move(current));
          } else if constexpr (std::is_same_v<T, layer::Add>) {
            return add(current, retained.at(spec.skip_from));
          } else if constexpr (std::is_same_v<T, layer::Softmax>) {
            return softmax(std::move(current));
          } else {
            return std::move(current);  // dropout is identity at inference
          }
        },
        l.spec);
    const int point = plan.capture_at[i];
    if (point >= 0) {
      const auto& params = plan.activation_params[static_cast<std::size_t>(point)];
      if (params) current = fake_quantize(std::move(current), *params);
      if (capture) result.trace.push_back({plan.points[static_cast<std::size_t>(point)].name, current});
    }
    if (std::find(keep.begin(), keep.end(), i) != keep.end()) retained[i] = current;
  }
  result.output = std::move(current);
  return result;
}

inline ForwardResult forward_fp32(const ModelGraph& model, const Tensor& input, bool capture,
                                  BnMode bn_mode = BnMode::kFolded) {
  return run_plan(make_plan(model, bn_mode, std::nullopt), input, capture);
}

// Binds calibrated ranges to a quantized plan. Every non-softmax capture
// point needs a range.
inline ExecutionPlan make_quant_plan(const ModelGraph& model, std::span<const RangeRecord> ranges,
                                     WeightMode weight_mode) {
  ExecutionPlan plan = make_plan(model, BnMode::kFolded, weight_mode);
  for (std::size_t p = 0; p < plan.points.size(); ++p) {
    if (plan.points[p].is_softmax) continue;
    const auto it = std::find_if(ranges.begin(), ranges.end(), [&](const RangeRecord& r) {
      return r.layer == plan.points[p].name;
    });
    if (it == ranges.end()) {
      fail(ErrorKind::kRange, "no calibrated range for layer '", plan.points[p].name, "'");
    }
    plan.activation_params[p] = it->params();
  }
  return plan;
}

inline ForwardResult forward_quant(const ModelGraph& model, std::span<const RangeRecord> ranges,
                                   const Tensor& input, WeightMode weight_mode, bool capture) {
  return run_plan(make_quant_plan(model, ranges, weight_mode), input, capture);
}

// Stacks samples `indices` of `images` into one batch tensor.
inline Tensor gather_samples(const Tensor& images, std::span<const std::size_t> indices) {
  const Shape s = images.shape();
  Tensor out(Shape{indices.size(), s.h, s.w, s.c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= s.n) fail(ErrorKind::kData, "sample index ", indices[i], " out of range");
    auto src = images.sample(indices[i]);
    std::copy(src.begin(), src.end(), out.sample(i).begin());
  }
  return out;
}

}  // namespace qdyn
