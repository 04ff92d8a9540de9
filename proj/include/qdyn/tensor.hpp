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

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qdyn/common.hpp"

namespace qdyn {

struct Shape {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;

  std::size_t elements() const { return n * h * w * c; }
  std::size_t per_sample() const { return h * w * c; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream oss;
  oss << s.n << "x" << s.h << "x" << s.w << "x" << s.c;
  return oss.str();
}

inline std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << to_string(s);
}

// Dense rank-4 fp32 array, NHWC, row-major.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(shape), data_(shape.elements(), fill) {}
  Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.elements()) {
      fail(ErrorKind::kShape, "tensor data length ", data_.size(),
           " does not match shape ", shape_, " (", shape_.elements(), " elements)");
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  std::size_t offset(std::size_t n, std::size_t y, std::size_t x, std::size_t c) const {
    return ((n * shape_.h + y) * shape_.w + x) * shape_.c + c;
  }
  float& at(std::size_t n, std::size_t y, std::size_t x, std::size_t c) {
    return data_[offset(n, y, x, c)];
  }
  float at(std::size_t n, std::size_t y, std::size_t x, std::size_t c) const {
    return data_[offset(n, y, x, c)];
  }

  std::span<float> sample(std::size_t n) {
    return std::span<float>(data_).subspan(n * shape_.per_sample(), shape_.per_sample());
  }
  std::span<const float> sample(std::size_t n) const {
    return std::span<const float>(data_).subspan(n * shape_.per_sample(), shape_.per_sample());
  }

  // Same data viewed under a new shape with an equal element count.
  Tensor reshaped(Shape shape) && {
    if (shape.elements() != data_.size()) {
      fail(ErrorKind::kShape, "cannot reshape ", shape_, " to ", shape);
    }
    shape_ = shape;
    return std::move(*this);
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

enum class WeightLayout {
  kConvHwio,       // (kh, kw, in_c, out_c)
  kDepthwiseHwc,   // (kh, kw, c)
  kDenseIo,        // (in, out)
};

inline std::string_view layout_name(WeightLayout layout) {
  switch (layout) {
    case WeightLayout::kConvHwio: return "conv_hwio";
    case WeightLayout::kDepthwiseHwc: return "depthwise_hwc";
    case WeightLayout::kDenseIo: return "dense_io";
  }
  return "unknown";
}

inline WeightLayout parse_layout(std::string_view name) {
  if (name == "conv_hwio") return WeightLayout::kConvHwio;
  if (name == "depthwise_hwc") return WeightLayout::kDepthwiseHwc;
  if (name == "dense_io") return WeightLayout::kDenseIo;
  fail(ErrorKind::kParse, "unknown weight layout '", name, "'");
}

// Kernel weights. For every layout the channel axis (output channel for
// conv/dense, the single per-input-channel kernel for depthwise) is the
// innermost axis, so the channel of flat index i is i % channels().
class WeightTensor {
 public:
  WeightTensor() = default;
  WeightTensor(WeightLayout layout, std::vector<std::size_t> dims, float fill = 0.0f)
      : layout_(layout), dims_(std::move(dims)) {
    validate_dims();
    data_.assign(expected_size(), fill);
  }
  WeightTensor(WeightLayout layout, std::vector<std::size_t> dims, std::vector<float> data)
      : layout_(layout), dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims();
    if (data_.size() != expected_size()) {
      fail(ErrorKind::kShape, layout_name(layout_), " weight data length ", data_.size(),
           " does not match dims (", expected_size(), " elements)");
    }
  }

  static WeightTensor conv(std::size_t kh, std::size_t kw, std::size_t in_c, std::size_t out_c) {
    return WeightTensor(WeightLayout::kConvHwio, {kh, kw, in_c, out_c});
  }
  static WeightTensor depthwise(std::size_t kh, std::size_t kw, std::size_t c) {
    return WeightTensor(WeightLayout::kDepthwiseHwc, {kh, kw, c});
  }
  static WeightTensor dense(std::size_t in, std::size_t out) {
    return WeightTensor(WeightLayout::kDenseIo, {in, out});
  }

  WeightLayout layout() const { return layout_; }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }
  std::size_t channels() const { return dims_.empty() ? 0 : dims_.back(); }

  std::size_t kernel_h() const { return layout_ == WeightLayout::kDenseIo ? 1 : dims_[0]; }
  std::size_t kernel_w() const { return layout_ == WeightLayout::kDenseIo ? 1 : dims_[1]; }
  std::size_t in_channels() const {
    switch (layout_) {
      case WeightLayout::kConvHwio: return dims_[2];
      case WeightLayout::kDepthwiseHwc: return dims_[2];
      case WeightLayout::kDenseIo: return dims_[0];
    }
    return 0;
  }

  // Glorot/He fan rule for this layout.
  std::size_t fan_in() const {
    switch (layout_) {
      case WeightLayout::kConvHwio: return dims_[0] * dims_[1] * dims_[2];
      case WeightLayout::kDepthwiseHwc: return dims_[0] * dims_[1];
      case WeightLayout::kDenseIo: return dims_[0];
    }
    return 0;
  }
  std::size_t fan_out() const {
    switch (layout_) {
      case WeightLayout::kConvHwio: return dims_[0] * dims_[1] * dims_[3];
      case WeightLayout::kDepthwiseHwc: return dims_[0] * dims_[1];
      case WeightLayout::kDenseIo: return dims_[1];
    }
    return 0;
  }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  friend bool operator==(const WeightTensor&, const WeightTensor&) = default;

 private:
  std::size_t expected_size() const {
    std::size_t total = 1;
    for (std::size_t d : dims_) total *= d;
    return total;
  }

  void validate_dims() const {
    const std::size_t rank = layout_ == WeightLayout::kConvHwio       ? 4
                             : layout_ == WeightLayout::kDepthwiseHwc ? 3
                                                                      : 2;
    if (dims_.size() != rank) {
      fail(ErrorKind::kShape, layout_name(layout_), " weights need rank ", rank, ", got ",
           dims_.size());
    }
  }

  WeightLayout layout_ = WeightLayout::kDenseIo;
  std::vector<std::size_t> dims_;
  std::vector<float> data_;
};

}  // namespace qdyn
