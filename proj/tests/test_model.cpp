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

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "qdyn/engine.hpp"
#include "qdyn/model.hpp"
#include "test_util.hpp"

namespace {

using qdyn::BuildOptions;
using qdyn::ConvKind;
using qdyn::ModelGraph;
using qdyn::Shape;
using qdyn::WeightTensor;

std::vector<std::vector<std::size_t>> conv_weight_dims(const ModelGraph& g) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& l : g.layers) {
    if (std::holds_alternative<qdyn::layer::Conv2D>(l.spec)) out.push_back(l.weights->dims());
  }
  return out;
}

// Output shape of the layer named `name`.
Shape shape_of(const ModelGraph& g, std::string_view name) {
  const auto shapes = g.infer_shapes(1);
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    if (g.layers[i].name == name) return shapes[i];
  }
  ADD_FAILURE() << "no layer " << name;
  return {};
}

Shape input_of(const ModelGraph& g, std::string_view name) {
  const auto shapes = g.infer_shapes(1);
  for (std::size_t i = 1; i < g.layers.size(); ++i) {
    if (g.layers[i].name == name) return shapes[i - 1];
  }
  ADD_FAILURE() << "no layer " << name;
  return {};
}

TEST(Initializers, GlorotBoundForUnitKernel) {
  const WeightTensor w = qdyn::init_glorot_uniform(WeightTensor::conv(1, 1, 1, 1), 3);
  EXPECT_LE(std::abs(w.values()[0]), std::sqrt(3.0));
}

TEST(Initializers, GlorotBoundFromFans) {
  const WeightTensor w = qdyn::init_glorot_uniform(WeightTensor::conv(3, 3, 3, 32), 9);
  const double bound = std::sqrt(6.0 / (27 + 288));
  EXPECT_NEAR(bound, 0.138, 5e-4);
  float largest = 0.0f;
  for (float v : w.values()) largest = std::max(largest, std::abs(v));
  EXPECT_LE(largest, bound);
  EXPECT_GT(largest, 0.9 * bound);  // actually spans the interval
}

TEST(Initializers, DepthwiseFans) {
  const WeightTensor w = WeightTensor::depthwise(3, 3, 64);
  EXPECT_EQ(w.fan_in(), 9u);
  EXPECT_EQ(w.fan_out(), 9u);
  const WeightTensor c = WeightTensor::conv(3, 3, 16, 8);
  EXPECT_EQ(c.fan_in(), 144u);
  EXPECT_EQ(c.fan_out(), 72u);
}

TEST(Initializers, SameSeedSameTensor) {
  for (auto init : {qdyn::Init::kGlorotUniform, qdyn::Init::kHeNormal}) {
    const auto a = qdyn::initialize(WeightTensor::conv(3, 3, 8, 8), init, 42);
    const auto b = qdyn::initialize(WeightTensor::conv(3, 3, 8, 8), init, 42);
    const auto c = qdyn::initialize(WeightTensor::conv(3, 3, 8, 8), init, 43);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
  }
}

TEST(Initializers, HeNormalStddev) {
  // 3x3x16x16 kernels drawn until at least 1e4 samples are pooled.
  std::vector<double> samples;
  for (std::uint64_t seed = 0; samples.size() < 10000; ++seed) {
    const auto w = qdyn::init_he_normal(WeightTensor::conv(3, 3, 16, 16), seed);
    samples.insert(samples.end(), w.values().begin(), w.values().end());
  }
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / samples.size();
  double var = 0.0;
  for (double v : samples) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / samples.size());
  const double expect = std::sqrt(2.0 / 144.0);
  EXPECT_NEAR(sd, expect, 0.05 * expect);
  EXPECT_NEAR(mean, 0.0, 0.05 * expect);
}

TEST(Initializers, HeNormalUnitStddevForFanInTwo) {
  std::vector<double> s;
  for (std::uint64_t seed = 0; s.size() < 20000; ++seed) {
    const auto w = qdyn::init_he_normal(WeightTensor::dense(2, 1000), seed);
    s.insert(s.end(), w.values().begin(), w.values().end());
  }
  double sq = 0.0;
  for (double v : s) sq += v * v;
  EXPECT_NEAR(std::sqrt(sq / s.size()), 1.0, 0.03);
}

TEST(ToyNet, RegularWeightShapes) {
  const ModelGraph g = qdyn::build_toynet(ConvKind::kRegular, {});
  const std::vector<std::vector<std::size_t>> expect = {
      {3, 3, 3, 32}, {3, 3, 32, 64}, {3, 3, 64, 128}, {3, 3, 128, 256}, {3, 3, 256, 256}};
  EXPECT_EQ(conv_weight_dims(g), expect);
}

TEST(ToyNet, EveryConvFollowedByBatchNormAndRelu) {
  for (ConvKind kind : {ConvKind::kRegular, ConvKind::kDws}) {
    const ModelGraph g = qdyn::build_toynet(kind, {});
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
      const auto& spec = g.layers[i].spec;
      if (!std::holds_alternative<qdyn::layer::Conv2D>(spec) &&
          !std::holds_alternative<qdyn::layer::DepthwiseConv2D>(spec)) {
        continue;
      }
      ASSERT_LT(i + 2, g.layers.size());
      EXPECT_TRUE(std::holds_alternative<qdyn::layer::BatchNorm>(g.layers[i + 1].spec));
      EXPECT_TRUE(std::holds_alternative<qdyn::layer::ReLU>(g.layers[i + 2].spec));
    }
  }
}

TEST(ToyNet, DwsPreservesStageShapes) {
  const ModelGraph r = qdyn::build_toynet(ConvKind::kRegular, {});
  const ModelGraph d = qdyn::build_toynet(ConvKind::kDws, {});
  EXPECT_EQ(input_of(r, "flatten"), (Shape{1, 4, 4, 256}));
  EXPECT_EQ(input_of(d, "flatten"), (Shape{1, 4, 4, 256}));
  EXPECT_EQ(shape_of(d, "flatten"), (Shape{1, 1, 1, 4096}));
  for (int s = 2; s <= 5; ++s) {
    const std::string id = std::to_string(s);
    EXPECT_EQ(shape_of(r, "conv" + id), shape_of(d, "pw" + id)) << s;
  }
  EXPECT_LT(d.parameter_count(), r.parameter_count());
  EXPECT_LT(d.mac_count(), r.mac_count());
}

TEST(ToyNet, LogitsAndDropoutBetweenDenseLayers) {
  for (ConvKind kind : {ConvKind::kRegular, ConvKind::kDws}) {
    const ModelGraph g = qdyn::build_toynet(kind, {});
    const auto shapes = g.infer_shapes(1);
    EXPECT_EQ(shapes.back(), (Shape{1, 1, 1, 10}));
    EXPECT_TRUE(std::holds_alternative<qdyn::layer::Softmax>(g.layers.back().spec));
    std::size_t dropouts = 0;
    for (const auto& l : g.layers) {
      if (const auto* d = std::get_if<qdyn::layer::DropoutMarker>(&l.spec)) {
        ++dropouts;
        EXPECT_FLOAT_EQ(d->keep_prob, 0.5f);
      }
    }
    EXPECT_EQ(dropouts, 2u);
  }
}

TEST(ToyNet, CapturePointCounts) {
  const auto regular = qdyn::capture_points(qdyn::build_toynet(ConvKind::kRegular, {}));
  const auto dws = qdyn::capture_points(qdyn::build_toynet(ConvKind::kDws, {}));
  EXPECT_EQ(regular.size(), 8u + 1u);  // 5 conv + 3 dense + softmax
  EXPECT_EQ(dws.size(), 12u + 1u);     // conv + 4 x (dw, pw) + 3 dense + softmax
  EXPECT_TRUE(regular.back().is_softmax);
}

TEST(ToyNet, BuildIsDeterministic) {
  BuildOptions o;
  o.seed = 17;
  o.init = qdyn::Init::kHeNormal;
  EXPECT_EQ(qdyn::build_toynet(ConvKind::kDws, o), qdyn::build_toynet(ConvKind::kDws, o));
  BuildOptions other = o;
  other.seed = 18;
  EXPECT_NE(qdyn::build_toynet(ConvKind::kDws, o), qdyn::build_toynet(ConvKind::kDws, other));
}

TEST(ToyNet, GammaAbsentWhenDisabled) {
  BuildOptions o;
  o.use_gamma = false;
  const ModelGraph g = qdyn::build_toynet(ConvKind::kRegular, o);
  for (const auto& l : g.layers) {
    if (const auto* bn = std::get_if<qdyn::layer::BatchNorm>(&l.spec)) {
      EXPECT_FALSE(bn->use_gamma);
      EXPECT_FALSE(l.bn->has_gamma());
      EXPECT_FLOAT_EQ(l.bn->epsilon, 1e-3f);
    }
  }
}

TEST(ToyNet, HeterogeneityScalesDepthwiseChannelsLogSpaced) {
  BuildOptions flat, het;
  het.heterogeneity = 16.0;
  const ModelGraph a = qdyn::build_toynet(ConvKind::kDws, flat);
  const ModelGraph b = qdyn::build_toynet(ConvKind::kDws, het);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const bool depthwise = std::holds_alternative<qdyn::layer::DepthwiseConv2D>(a.layers[i].spec);
    if (!a.layers[i].weights) continue;
    if (!depthwise) {
      EXPECT_EQ(a.layers[i].weights, b.layers[i].weights) << a.layers[i].name;
      continue;
    }
    const auto va = a.layers[i].weights->values();
    const auto vb = b.layers[i].weights->values();
    const std::size_t c = a.layers[i].weights->channels();
    for (std::size_t j = 0; j < va.size(); ++j) {
      const double factor = std::pow(16.0, static_cast<double>(j % c) / static_cast<double>(c - 1));
      ASSERT_NEAR(vb[j], va[j] * factor, 1e-6 * std::max(1.0, std::abs(va[j] * factor)));
    }
  }
}

TEST(MobileNet, GlobalPoolSeesFourByFourBy1024) {
  const ModelGraph g = qdyn::build_mobilenet_v1_cifar({});
  EXPECT_EQ(input_of(g, "gap"), (Shape{1, 4, 4, 1024}));
  EXPECT_EQ(g.infer_shapes(1).back(), (Shape{1, 1, 1, 10}));
}

TEST(MobileNet, TwentySevenConvLayers) {
  const ModelGraph g = qdyn::build_mobilenet_v1_cifar({});
  std::size_t full = 0, dw = 0, pw = 0;
  for (const auto& l : g.layers) {
    if (const auto* c = std::get_if<qdyn::layer::Conv2D>(&l.spec)) (c->k == 1 ? pw : full)++;
    if (std::holds_alternative<qdyn::layer::DepthwiseConv2D>(l.spec)) ++dw;
  }
  EXPECT_EQ(full, 1u);
  EXPECT_EQ(dw, 13u);
  EXPECT_EQ(pw, 13u);
}

TEST(MobileNet, No128Or1024Downsample) {
  const ModelGraph g = qdyn::build_mobilenet_v1_cifar({});
  // The first 128-channel and first 1024-channel blocks keep resolution.
  EXPECT_EQ(shape_of(g, "block2_pw"), (Shape{1, 16, 16, 128}));
  EXPECT_EQ(input_of(g, "block2_dw"), (Shape{1, 16, 16, 64}));
  EXPECT_EQ(shape_of(g, "block12_pw"), (Shape{1, 4, 4, 1024}));
  EXPECT_EQ(input_of(g, "block12_dw"), (Shape{1, 4, 4, 512}));
}

TEST(ResNet, ProjectionsAtPlotIndices) {
  const ModelGraph g = qdyn::build_resnet34_cifar({});
  std::vector<std::size_t> projections;
  std::size_t ordinal = 0;
  for (const auto& l : g.layers) {
    if (!qdyn::is_weighted(l.spec)) continue;
    ++ordinal;
    if (const auto* c = std::get_if<qdyn::layer::Conv2D>(&l.spec); c && c->k == 1) {
      projections.push_back(ordinal);
    }
  }
  EXPECT_EQ(projections, (std::vector<std::size_t>{10, 19, 32}));
}

TEST(ResNet, AddsAreShapeMatchedAndLogitsTen) {
  const ModelGraph g = qdyn::build_resnet34_cifar({});
  const auto shapes = g.infer_shapes(1);
  std::size_t adds = 0;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    if (const auto* a = std::get_if<qdyn::layer::Add>(&g.layers[i].spec)) {
      ++adds;
      EXPECT_EQ(shapes[a->skip_from], shapes[i - 1]) << g.layers[i].name;
    }
  }
  EXPECT_EQ(adds, 16u);
  EXPECT_EQ(shapes.back(), (Shape{1, 1, 1, 10}));
  EXPECT_EQ(input_of(g, "gap").c, 512u);
}

TEST(ResNet, WeightedLayerCount) {
  // 1 stem + 16 blocks x 2 convs + 3 projections + 1 dense.
  EXPECT_EQ(qdyn::build_resnet34_cifar({}).weighted_layers().size(), 37u);
}

TEST(GraphValidation, BatchNormMustFollowWeightedLayer) {
  ModelGraph g = qdyn::build_toynet(ConvKind::kRegular, {});
  std::swap(g.layers[1], g.layers[2]);  // relu before batch norm
  EXPECT_THROW(g.infer_shapes(1), qdyn::Error);
}

TEST(GraphValidation, AddWithMismatchedShapesRejected) {
  ModelGraph g = qdyn::build_resnet34_cifar({});
  for (auto& l : g.layers) {
    if (auto* a = std::get_if<qdyn::layer::Add>(&l.spec)) {
      a->skip_from = 0;  // stem output: 16x16x64, never matches a later stage
    }
  }
  EXPECT_THROW(g.infer_shapes(1), qdyn::Error);
}

}  // namespace
