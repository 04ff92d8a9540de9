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

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "qdyn/common.hpp"
#include "qdyn/kernels.hpp"
#include "qdyn/tensor.hpp"

namespace qdyn {

namespace layer {

struct Conv2D {
  std::size_t out_c = 0;
  std::size_t k = 3;
  std::size_t stride = 1;
  Padding padding = Padding::kSame;
  bool has_bias = false;
  friend bool operator==(const Conv2D&, const Conv2D&) = default;
};

struct DepthwiseConv2D {
  std::size_t k = 3;
  std::size_t stride = 1;
  Padding padding = Padding::kSame;
  bool has_bias = false;
  friend bool operator==(const DepthwiseConv2D&, const DepthwiseConv2D&) = default;
};

struct Dense {
  std::size_t out = 0;
  friend bool operator==(const Dense&, const Dense&) = default;
};

struct BatchNorm {
  bool use_gamma = true;
  float epsilon = 1e-3f;
  friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};

struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};

struct MaxPool {
  std::size_t k = 2;
  std::size_t stride = 2;
  friend bool operator==(const MaxPool&, const MaxPool&) = default;
};

struct GlobalAvgPool {
  friend bool operator==(const GlobalAvgPool&, const GlobalAvgPool&) = default;
};

struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};

// Sums the previous layer's output with the output of layer skip_from.
struct Add {
  std::size_t skip_from = 0;
  friend bool operator==(const Add&, const Add&) = default;
};

struct Softmax {
  friend bool operator==(const Softmax&, const Softmax&) = default;
};

// Identity at inference; keep_prob is provenance only.
struct DropoutMarker {
  float keep_prob = 0.5f;
  friend bool operator==(const DropoutMarker&, const DropoutMarker&) = default;
};

}  // namespace layer

using LayerSpec =
    std::variant<layer::Conv2D, layer::DepthwiseConv2D, layer::Dense, layer::BatchNorm,
                 layer::ReLU, layer::MaxPool, layer::GlobalAvgPool, layer::Flatten, layer::Add,
                 layer::Softmax, layer::DropoutMarker>;

inline std::string_view layer_kind(const LayerSpec& spec) {
  static constexpr std::string_view kNames[] = {
      "conv2d", "depthwise_conv2d", "dense",   "batch_norm", "relu",   "max_pool",
      "global_avg_pool", "flatten", "add",     "softmax",    "dropout"};
  return kNames[spec.index()];
}

inline bool is_weighted(const LayerSpec& spec) {
  return std::holds_alternative<layer::Conv2D>(spec) ||
         std::holds_alternative<layer::DepthwiseConv2D>(spec) ||
         std::holds_alternative<layer::Dense>(spec);
}

// Inference-mode batch-norm state. An empty gamma means the layer was
// trained without scaling and behaves as gamma = 1.
struct BatchNormParams {
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> moving_mean;
  std::vector<float> moving_var;
  float epsilon = 1e-3f;

  std::size_t channels() const { return beta.size(); }
  bool has_gamma() const { return !gamma.empty(); }

  static BatchNormParams identity(std::size_t channels, bool use_gamma, float epsilon = 1e-3f) {
    BatchNormParams bn;
    if (use_gamma) bn.gamma.assign(channels, 1.0f);
    bn.beta.assign(channels, 0.0f);
    bn.moving_mean.assign(channels, 0.0f);
    bn.moving_var.assign(channels, 1.0f);
    bn.epsilon = epsilon;
    return bn;
  }

  friend bool operator==(const BatchNormParams&, const BatchNormParams&) = default;
};

struct Layer {
  std::string name;
  LayerSpec spec;
  std::optional<WeightTensor> weights;
  std::vector<float> bias;  // empty when the layer has no bias
  std::optional<BatchNormParams> bn;
  // Reads from this earlier layer instead of the preceding one (used by
  // residual projection shortcuts).
  std::optional<std::size_t> input_from;

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct ModelGraph {
  std::string architecture;
  Shape input_shape;  // n is ignored; (h, w, c) of one sample
  std::vector<Layer> layers;

  // Per-layer output shape for a batch of `batch` samples. Validates every
  // structural invariant along the way.
  std::vector<Shape> infer_shapes(std::size_t batch = 1) const;

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const Layer& l : layers) {
      if (l.weights) total += l.weights->size();
      total += l.bias.size();
      if (l.bn) {
        total += l.bn->gamma.size() + l.bn->beta.size() + l.bn->moving_mean.size() +
                 l.bn->moving_var.size();
      }
    }
    return total;
  }

  std::size_t mac_count() const;

  // Graph positions of conv/depthwise/dense layers in order.
  std::vector<std::size_t> weighted_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (is_weighted(layers[i].spec)) out.push_back(i);
    }
    return out;
  }

  std::size_t source_of(std::size_t index) const {
    return layers[index].input_from.value_or(index - 1);
  }

  friend bool operator==(const ModelGraph&, const ModelGraph&) = default;
};

namespace detail {

inline std::size_t source_checked(const ModelGraph& g, std::size_t i) {
  if (g.layers[i].input_from) {
    if (*g.layers[i].input_from >= i) {
      fail(ErrorKind::kShape, "layer '", g.layers[i].name, "' reads from non-earlier layer ",
           *g.layers[i].input_from);
    }
  }
  return g.source_of(i);
}

}  // namespace detail

inline std::vector<Shape> ModelGraph::infer_shapes(std::size_t batch) const {
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  const Shape graph_in{batch, input_shape.h, input_shape.w, input_shape.c};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const Shape in = (i == 0 && !l.input_from) ? graph_in : shapes[detail::source_checked(*this, i)];
    auto require_weights = [&](WeightLayout layout) -> const WeightTensor& {
      if (!l.weights || l.weights->layout() != layout) {
        fail(ErrorKind::kShape, "layer '", l.name, "' needs ", layout_name(layout), " weights");
      }
      return *l.weights;
    };
    Shape out = std::visit(
        [&](const auto& spec) -> Shape {
          using T = std::decay_t<decltype(spec)>;
          if constexpr (std::is_same_v<T, layer::Conv2D>) {
            const WeightTensor& w = require_weights(WeightLayout::kConvHwio);
            if (w.dims() != std::vector<std::size_t>{spec.k, spec.k, in.c, spec.out_c}) {
              fail(ErrorKind::kShape, "layer '", l.name, "': kernel dims do not match ", spec.k,
                   "x", spec.k, "x", in.c, "x", spec.out_c);
            }
            if (spec.has_bias != !l.bias.empty()) {
              fail(ErrorKind::kShape, "layer '", l.name, "': bias presence mismatch");
            }
            detail::check_bias(l.bias, spec.out_c, "conv2d");
            const Window wy = window_geometry(in.h, spec.k, spec.stride, spec.padding);
            const Window wx = window_geometry(in.w, spec.k, spec.stride, spec.padding);
            return {in.n, wy.out, wx.out, spec.out_c};
          } else if constexpr (std::is_same_v<T, layer::DepthwiseConv2D>) {
            const WeightTensor& w = require_weights(WeightLayout::kDepthwiseHwc);
            if (w.dims() != std::vector<std::size_t>{spec.k, spec.k, in.c}) {
              fail(ErrorKind::kShape, "layer '", l.name, "': depthwise kernel needs one ", spec.k,
                   "x", spec.k, " kernel per input channel (", in.c, ")");
            }
            if (spec.has_bias != !l.bias.empty()) {
              fail(ErrorKind::kShape, "layer '", l.name, "': bias presence mismatch");
            }
            detail::check_bias(l.bias, in.c, "depthwise_conv2d");
            const Window wy = window_geometry(in.h, spec.k, spec.stride, spec.padding);
            const Window wx = window_geometry(in.w, spec.k, spec.stride, spec.padding);
            return {in.n, wy.out, wx.out, in.c};
          } else if constexpr (std::is_same_v<T, layer::Dense>) {
            const WeightTensor& w = require_weights(WeightLayout::kDenseIo);
            if (w.dims() != std::vector<std::size_t>{in.per_sample(), spec.out}) {
              fail(ErrorKind::kShape, "layer '", l.name, "': dense weights must be ",
                   in.per_sample(), "x", spec.out);
            }
            detail::check_bias(l.bias, spec.out, "dense");
            return {in.n, 1, 1, spec.out};
          } else if constexpr (std::is_same_v<T, layer::BatchNorm>) {
            if (i == 0 || l.input_from || !is_weighted(layers[i - 1].spec)) {
              fail(ErrorKind::kShape, "batch norm '", l.name,
                   "' must directly follow a conv2d, depthwise_conv2d or dense layer");
            }
            if (!l.bn || l.bn->channels() != in.c || l.bn->moving_mean.size() != in.c ||
                l.bn->moving_var.size() != in.c || l.bn->has_gamma() != spec.use_gamma ||
                (spec.use_gamma && l.bn->gamma.size() != in.c)) {
              fail(ErrorKind::kShape, "batch norm '", l.name, "' parameters do not match ", in.c,
                   " channels");
            }
            return in;
          } else if constexpr (std::is_same_v<T, layer::MaxPool>) {
            const Window wy = window_geometry(in.h, spec.k, spec.stride, Padding::kValid);
            const Window wx = window_geometry(in.w, spec.k, spec.stride, Padding::kValid);
            return {in.n, wy.out, wx.out, in.c};
          } else if constexpr (std::is_same_v<T, layer::GlobalAvgPool>) {
            return {in.n, 1, 1, in.c};
          } else if constexpr (std::is_same_v<T, layer::Flatten>) {
            return {in.n, 1, 1, in.per_sample()};
          } else if constexpr (std::is_same_v<T, layer::Add>) {
            if (spec.skip_from >= i) {
              fail(ErrorKind::kShape, "add '", l.name, "' skips from non-earlier layer ",
                   spec.skip_from);
            }
            if (shapes[spec.skip_from] != in) {
              fail(ErrorKind::kShape, "add '", l.name, "' operand shapes differ (", in, " vs ",
                   shapes[spec.skip_from], ")");
            }
            return in;
          } else {
            return in;
          }
        },
        l.spec);
    shapes.push_back(out);
  }
  return shapes;
}

inline std::size_t ModelGraph::mac_count() const {
  const std::vector<Shape> shapes = infer_shapes(1);
  std::size_t total = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Shape& out = shapes[i];
    if (const auto* conv = std::get_if<layer::Conv2D>(&layers[i].spec)) {
      total += conv2d_macs(out.h, out.w, conv->k, layers[i].weights->in_channels(), conv->out_c);
    } else if (const auto* dw = std::get_if<layer::DepthwiseConv2D>(&layers[i].spec)) {
      total += depthwise_macs(out.h, out.w, dw->k, out.c);
    } else if (std::holds_alternative<layer::Dense>(layers[i].spec)) {
      total += layers[i].weights->size();
    }
  }
  return total;
}

enum class Init { kGlorotUniform, kHeNormal };

inline std::string_view init_name(Init init) {
  return init == Init::kGlorotUniform ? "glorot_uniform" : "he_normal";
}

inline Init parse_init(std::string_view name) {
  if (name == "glorot_uniform") return Init::kGlorotUniform;
  if (name == "he_normal") return Init::kHeNormal;
  fail(ErrorKind::kUsage, "unknown init '", name, "' (expected glorot_uniform or he_normal)");
}

inline WeightTensor init_glorot_uniform(WeightTensor w, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(w.fan_in() + w.fan_out()));
  for (float& v : w.values()) v = static_cast<float>(rng.uniform(-bound, bound));
  return w;
}

inline WeightTensor init_he_normal(WeightTensor w, std::uint64_t seed) {
  Rng rng(seed);
  const double stddev = std::sqrt(2.0 / static_cast<double>(w.fan_in()));
  for (float& v : w.values()) v = static_cast<float>(rng.normal(0.0, stddev));
  return w;
}

inline WeightTensor initialize(WeightTensor w, Init init, std::uint64_t seed) {
  return init == Init::kGlorotUniform ? init_glorot_uniform(std::move(w), seed)
                                      : init_he_normal(std::move(w), seed);
}

// Scales channel i of a depthwise kernel by factor^(i / (C - 1)), i.e.
// log-spaced over [1, factor].
inline void apply_channel_heterogeneity(WeightTensor& w, double factor) {
  const std::size_t channels = w.channels();
  if (factor == 1.0 || channels < 2) return;
  std::vector<float> scale(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    scale[c] = static_cast<float>(
        std::pow(factor, static_cast<double>(c) / static_cast<double>(channels - 1)));
  }
  auto v = w.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= scale[i % channels];
}

struct BuildOptions {
  bool use_gamma = true;
  Init init = Init::kGlorotUniform;
  std::uint64_t seed = 0;
  double heterogeneity = 1.0;  // depthwise per-channel range spread, >= 1
};

// Appends layers while tracking the running channel count.
class GraphBuilder {
 public:
  GraphBuilder(std::string architecture, Shape input, BuildOptions options)
      : options_(options), channels_(input.c) {
    if (!(options.heterogeneity >= 1.0) || !std::isfinite(options.heterogeneity)) {
      fail(ErrorKind::kUsage, "heterogeneity must be a finite value >= 1, got ",
           options.heterogeneity);
    }
    graph_.architecture = std::move(architecture);
    graph_.input_shape = Shape{1, input.h, input.w, input.c};
  }

  std::size_t last() const { return graph_.layers.size() - 1; }
  std::size_t channels() const { return channels_; }

  // conv -> BN [-> ReLU]
  std::size_t conv_bn(const std::string& name, std::size_t out_c, std::size_t k,
                      std::size_t stride, bool with_relu = true,
                      std::optional<std::size_t> input_from = std::nullopt,
                      std::optional<std::size_t> in_c = std::nullopt) {
    Layer conv;
    conv.name = name;
    conv.spec = layer::Conv2D{out_c, k, stride, Padding::kSame, false};
    conv.weights = initialize(WeightTensor::conv(k, k, in_c.value_or(channels_), out_c),
                              options_.init, next_seed());
    conv.input_from = input_from;
    graph_.layers.push_back(std::move(conv));
    channels_ = out_c;
    push_bn(name + "_bn");
    if (with_relu) push_relu(name + "_relu");
    return last();
  }

  std::size_t depthwise_bn(const std::string& name, std::size_t k, std::size_t stride) {
    Layer dw;
    dw.name = name;
    dw.spec = layer::DepthwiseConv2D{k, stride, Padding::kSame, false};
    WeightTensor w = initialize(WeightTensor::depthwise(k, k, channels_), options_.init,
                                next_seed());
    apply_channel_heterogeneity(w, options_.heterogeneity);
    dw.weights = std::move(w);
    graph_.layers.push_back(std::move(dw));
    push_bn(name + "_bn");
    push_relu(name + "_relu");
    return last();
  }

  std::size_t dense(const std::string& name, std::size_t out, bool with_relu) {
    const std::size_t features = features_;
    Layer fc;
    fc.name = name;
    fc.spec = layer::Dense{out};
    fc.weights = initialize(WeightTensor::dense(features, out), options_.init, next_seed());
    fc.bias.assign(out, 0.0f);
    graph_.layers.push_back(std::move(fc));
    channels_ = out;
    features_ = out;
    if (with_relu) push_relu(name + "_relu");
    return last();
  }

  void set_features(std::size_t features) { features_ = features; }

  std::size_t push(std::string name, LayerSpec spec) {
    Layer l;
    l.name = std::move(name);
    l.spec = spec;
    graph_.layers.push_back(std::move(l));
    return last();
  }

  std::size_t push_relu(const std::string& name) { return push(name, layer::ReLU{}); }

  ModelGraph finish() && {
    graph_.infer_shapes(1);
    return std::move(graph_);
  }

 private:
  void push_bn(const std::string& name) {
    Layer bn;
    bn.name = name;
    bn.spec = layer::BatchNorm{options_.use_gamma, 1e-3f};
    bn.bn = BatchNormParams::identity(channels_, options_.use_gamma, 1e-3f);
    graph_.layers.push_back(std::move(bn));
  }

  std::uint64_t next_seed() { return mix_seed(options_.seed, weight_index_++); }

  BuildOptions options_;
  ModelGraph graph_;
  std::size_t channels_ = 0;
  std::size_t features_ = 0;
  std::uint64_t weight_index_ = 0;
};

enum class ConvKind { kRegular, kDws };

inline constexpr Shape kCifarInput{1, 32, 32, 3};

// Five 3x3 conv stages, then FC 256 -> FC 256 -> FC 10. The DWS variant
// swaps every conv after the first for depthwise 3x3 + pointwise 1x1 with
// the same input/output dimensions.
inline ModelGraph build_toynet(ConvKind kind, const BuildOptions& options) {
  struct Stage {
    std::size_t out_c;
    std::size_t stride;
  };
  static constexpr Stage kStages[] = {{32, 2}, {64, 1}, {128, 2}, {256, 2}, {256, 1}};
  GraphBuilder b(kind == ConvKind::kRegular ? "toynet_regular" : "toynet_dws", kCifarInput,
                 options);
  for (std::size_t s = 0; s < std::size(kStages); ++s) {
    const std::string id = std::to_string(s + 1);
    if (s == 0 || kind == ConvKind::kRegular) {
      b.conv_bn("conv" + id, kStages[s].out_c, 3, kStages[s].stride);
    } else {
      b.depthwise_bn("dw" + id, 3, kStages[s].stride);
      b.conv_bn("pw" + id, kStages[s].out_c, 1, 1);
    }
  }
  b.push("flatten", layer::Flatten{});
  b.set_features(4 * 4 * 256);
  b.dense("fc1", 256, true);
  b.push("dropout1", layer::DropoutMarker{0.5f});
  b.dense("fc2", 256, true);
  b.push("dropout2", layer::DropoutMarker{0.5f});
  b.dense("fc3", 10, false);
  b.push("softmax", layer::Softmax{});
  return std::move(b).finish();
}

// MobileNet-V1 body for 32x32 inputs: the first 128- and the first
// 1024-channel blocks keep stride 1, so global pooling sees 4x4x1024.
inline ModelGraph build_mobilenet_v1_cifar(const BuildOptions& options) {
  struct Block {
    std::size_t out_c;
    std::size_t stride;
  };
  static constexpr Block kBlocks[] = {{64, 1},  {128, 1}, {128, 1}, {256, 2}, {256, 1},
                                      {512, 2}, {512, 1}, {512, 1}, {512, 1}, {512, 1},
                                      {512, 1}, {1024, 1}, {1024, 1}};
  GraphBuilder b("mobilenet_v1_cifar", kCifarInput, options);
  b.conv_bn("conv1", 32, 3, 2);
  for (std::size_t i = 0; i < std::size(kBlocks); ++i) {
    const std::string id = std::to_string(i + 1);
    b.depthwise_bn("block" + id + "_dw", 3, kBlocks[i].stride);
    b.conv_bn("block" + id + "_pw", kBlocks[i].out_c, 1, 1);
  }
  b.push("gap", layer::GlobalAvgPool{});
  b.set_features(1024);
  b.dense("fc", 10, false);
  b.push("softmax", layer::Softmax{});
  return std::move(b).finish();
}

// ResNet-34 with basic blocks [3, 4, 6, 3]. No max-pool after the stem and
// stride 1 at the first 128- and 512-channel blocks. Channel or stride
// changes get a 1x1 projection shortcut placed after the block's two convs.
inline ModelGraph build_resnet34_cifar(const BuildOptions& options) {
  struct Stage {
    std::size_t out_c;
    std::size_t blocks;
    std::size_t stride;
  };
  static constexpr Stage kStages[] = {{64, 3, 1}, {128, 4, 1}, {256, 6, 2}, {512, 3, 1}};
  GraphBuilder b("resnet34_cifar", kCifarInput, options);
  std::size_t block_input = b.conv_bn("conv1", 64, 7, 2);
  for (std::size_t s = 0; s < std::size(kStages); ++s) {
    for (std::size_t blk = 0; blk < kStages[s].blocks; ++blk) {
      const std::string id = "stage" + std::to_string(s + 1) + "_block" + std::to_string(blk + 1);
      const std::size_t stride = blk == 0 ? kStages[s].stride : 1;
      const std::size_t in_c = b.channels();
      b.conv_bn(id + "_conv1", kStages[s].out_c, 3, stride);
      const std::size_t main_path = b.conv_bn(id + "_conv2", kStages[s].out_c, 3, 1, false);
      // The add joins the previous layer with the other branch.
      std::size_t skip = block_input;
      if (in_c != kStages[s].out_c || stride != 1) {
        b.conv_bn(id + "_proj", kStages[s].out_c, 1, stride, false, block_input, in_c);
        skip = main_path;
      }
      b.push(id + "_add", layer::Add{skip});
      block_input = b.push_relu(id + "_relu");
    }
  }
  b.push("gap", layer::GlobalAvgPool{});
  b.set_features(512);
  b.dense("fc", 10, false);
  b.push("softmax", layer::Softmax{});
  return std::move(b).finish();
}

}  // namespace qdyn
