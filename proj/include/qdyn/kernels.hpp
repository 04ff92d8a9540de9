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

// Reference fp32 kernels shared by the fp32 and the simulated-quantized
// execution paths. All kernels are pure; every output element is reduced
// in a fixed sequential order, so results are bit-reproducible regardless
// of how samples are spread over threads.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "qdyn/common.hpp"
#include "qdyn/tensor.hpp"

namespace qdyn {

enum class Padding { kSame, kValid };

inline std::string_view padding_name(Padding p) { return p == Padding::kSame ? "same" : "valid"; }

inline Padding parse_padding(std::string_view name) {
  if (name == "same") return Padding::kSame;
  if (name == "valid") return Padding::kValid;
  fail(ErrorKind::kParse, "unknown padding '", name, "'");
}

struct Window {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};

// SAME puts the odd padding element at the bottom/right.
inline Window window_geometry(std::size_t in, std::size_t k, std::size_t stride, Padding padding) {
  if (stride == 0) fail(ErrorKind::kShape, "stride must be positive");
  if (k == 0) fail(ErrorKind::kShape, "kernel size must be positive");
  Window win;
  if (padding == Padding::kSame) {
    win.out = (in + stride - 1) / stride;
    const std::size_t needed = (win.out == 0 ? 0 : (win.out - 1) * stride + k);
    const std::size_t pad_total = needed > in ? needed - in : 0;
    win.pad_before = pad_total / 2;
  } else {
    if (in < k) fail(ErrorKind::kShape, "VALID window of size ", k, " exceeds input extent ", in);
    win.out = (in - k) / stride + 1;
  }
  return win;
}

namespace detail {

// c[p, :] += a[p, :] * b for a row-major (rows x depth) a, (depth x cols) b.
// Accumulates over depth in ascending order for every output element.
inline void gemm_accumulate(const float* a, const float* b, float* c, std::size_t rows,
                            std::size_t depth, std::size_t cols) {
  std::size_t p = 0;
  for (; p + 4 <= rows; p += 4) {
    const float* a0 = a + (p + 0) * depth;
    const float* a1 = a + (p + 1) * depth;
    const float* a2 = a + (p + 2) * depth;
    const float* a3 = a + (p + 3) * depth;
    float* __restrict c0 = c + (p + 0) * cols;
    float* __restrict c1 = c + (p + 1) * cols;
    float* __restrict c2 = c + (p + 2) * cols;
    float* __restrict c3 = c + (p + 3) * cols;
    for (std::size_t k = 0; k < depth; ++k) {
      const float* __restrict brow = b + k * cols;
      const float v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
      for (std::size_t j = 0; j < cols; ++j) {
        const float bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; p < rows; ++p) {
    const float* arow = a + p * depth;
    float* __restrict crow = c + p * cols;
    for (std::size_t k = 0; k < depth; ++k) {
      const float* __restrict brow = b + k * cols;
      const float v = arow[k];
      for (std::size_t j = 0; j < cols; ++j) crow[j] += v * brow[j];
    }
  }
}

inline void check_bias(std::span<const float> bias, std::size_t channels, const char* op) {
  if (!bias.empty() && bias.size() != channels) {
    fail(ErrorKind::kShape, op, ": bias length ", bias.size(), " != output channels ", channels);
  }
}

inline void add_bias(std::span<float> out, std::span<const float> bias) {
  if (bias.empty()) return;
  const std::size_t channels = bias.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % channels];
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const WeightTensor& w, std::span<const float> bias,
                     std::size_t stride, Padding padding) {
  if (w.layout() != WeightLayout::kConvHwio) {
    fail(ErrorKind::kShape, "conv2d: expected conv_hwio weights, got ", layout_name(w.layout()));
  }
  const Shape in = input.shape();
  const std::size_t kh = w.dims()[0], kw = w.dims()[1], in_c = w.dims()[2], out_c = w.dims()[3];
  if (in.c != in_c) {
    fail(ErrorKind::kShape, "conv2d: input channels ", in.c, " (input ", in,
         ") != kernel in_c ", in_c);
  }
  detail::check_bias(bias, out_c, "conv2d");
  const Window wy = window_geometry(in.h, kh, stride, padding);
  const Window wx = window_geometry(in.w, kw, stride, padding);
  Tensor out(Shape{in.n, wy.out, wx.out, out_c});
  const std::size_t positions = wy.out * wx.out;
  const std::size_t depth = kh * kw * in_c;
  const bool direct = kh == 1 && kw == 1 && stride == 1;

  parallel_for(in.n, [&](std::size_t n) {
    std::span<const float> src = input.sample(n);
    std::span<float> dst = out.sample(n);
    if (direct) {
      detail::gemm_accumulate(src.data(), w.data(), dst.data(), positions, depth, out_c);
    } else {
      std::vector<float> patches(positions * depth, 0.0f);
      for (std::size_t oy = 0; oy < wy.out; ++oy) {
        for (std::size_t ox = 0; ox < wx.out; ++ox) {
          float* row = patches.data() + (oy * wx.out + ox) * depth;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(wy.pad_before);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(wx.pad_before);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
              const float* pixel = src.data() + (static_cast<std::size_t>(iy) * in.w +
                                                 static_cast<std::size_t>(ix)) * in_c;
              std::copy(pixel, pixel + in_c, row + (ky * kw + kx) * in_c);
            }
          }
        }
      }
      detail::gemm_accumulate(patches.data(), w.data(), dst.data(), positions, depth, out_c);
    }
    detail::add_bias(dst, bias);
  });
  return out;
}

inline Tensor depthwise_conv2d(const Tensor& input, const WeightTensor& w,
                               std::span<const float> bias, std::size_t stride,
                               Padding padding) {
  if (w.layout() != WeightLayout::kDepthwiseHwc) {
    fail(ErrorKind::kShape, "depthwise_conv2d: expected depthwise_hwc weights, got ",
         layout_name(w.layout()));
  }
  const Shape in = input.shape();
  const std::size_t kh = w.dims()[0], kw = w.dims()[1], channels = w.dims()[2];
  if (in.c != channels) {
    fail(ErrorKind::kShape, "depthwise_conv2d: input channels ", in.c, " (input ", in,
         ") != kernel channels ", channels);
  }
  detail::check_bias(bias, channels, "depthwise_conv2d");
  const Window wy = window_geometry(in.h, kh, stride, padding);
  const Window wx = window_geometry(in.w, kw, stride, padding);
  Tensor out(Shape{in.n, wy.out, wx.out, channels});

  parallel_for(in.n, [&](std::size_t n) {
    std::span<const float> src = input.sample(n);
    std::span<float> dst = out.sample(n);
    for (std::size_t oy = 0; oy < wy.out; ++oy) {
      for (std::size_t ox = 0; ox < wx.out; ++ox) {
        float* __restrict acc = dst.data() + (oy * wx.out + ox) * channels;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(wy.pad_before);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(wx.pad_before);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
            const float* __restrict pixel =
                src.data() +
                (static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix)) * channels;
            const float* __restrict tap = w.data() + (ky * kw + kx) * channels;
            for (std::size_t c = 0; c < channels; ++c) acc[c] += pixel[c] * tap[c];
          }
        }
      }
    }
    detail::add_bias(dst, bias);
  });
  return out;
}

// Treats each sample as a flat feature vector; output is n x 1 x 1 x out.
inline Tensor dense(const Tensor& input, const WeightTensor& w, std::span<const float> bias) {
  if (w.layout() != WeightLayout::kDenseIo) {
    fail(ErrorKind::kShape, "dense: expected dense_io weights, got ", layout_name(w.layout()));
  }
  const Shape in = input.shape();
  const std::size_t features = w.dims()[0], out_features = w.dims()[1];
  if (in.per_sample() != features) {
    fail(ErrorKind::kShape, "dense: input features ", in.per_sample(), " (input ", in,
         ") != weight in ", features);
  }
  detail::check_bias(bias, out_features, "dense");
  Tensor out(Shape{in.n, 1, 1, out_features});
  parallel_for(in.n, [&](std::size_t n) {
    std::span<float> dst = out.sample(n);
    detail::gemm_accumulate(input.sample(n).data(), w.data(), dst.data(), 1, features,
                            out_features);
    detail::add_bias(dst, bias);
  });
  return out;
}

inline Tensor relu(Tensor x) {
  for (float& v : x.values()) v = v > 0.0f ? v : 0.0f;
  return x;
}

// VALID pooling window.
inline Tensor maxpool(const Tensor& x, std::size_t k, std::size_t stride) {
  const Shape in = x.shape();
  const Window wy = window_geometry(in.h, k, stride, Padding::kValid);
  const Window wx = window_geometry(in.w, k, stride, Padding::kValid);
  Tensor out(Shape{in.n, wy.out, wx.out, in.c});
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t oy = 0; oy < wy.out; ++oy) {
      for (std::size_t ox = 0; ox < wx.out; ++ox) {
        for (std::size_t c = 0; c < in.c; ++c) {
          float best = -std::numeric_limits<float>::infinity();
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              best = std::max(best, x.at(n, oy * stride + ky, ox * stride + kx, c));
            }
          }
          out.at(n, oy, ox, c) = best;
        }
      }
    }
  }
  return out;
}

inline Tensor global_avg_pool(const Tensor& x) {
  const Shape in = x.shape();
  if (in.h * in.w == 0) fail(ErrorKind::kShape, "global_avg_pool: empty spatial extent ", in);
  Tensor out(Shape{in.n, 1, 1, in.c});
  const float count = static_cast<float>(in.h * in.w);
  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t c = 0; c < in.c; ++c) {
      float sum = 0.0f;
      for (std::size_t y = 0; y < in.h; ++y) {
        for (std::size_t xx = 0; xx < in.w; ++xx) sum += x.at(n, y, xx, c);
      }
      out.at(n, 0, 0, c) = sum / count;
    }
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::kShape, "add: operand shapes differ (", a.shape(), " vs ", b.shape(), ")");
  }
  Tensor out = a;
  auto dst = out.values();
  auto rhs = b.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += rhs[i];
  return out;
}

// Softmax over the channel axis of every (n, y, x) row, max-subtracted.
inline Tensor softmax(Tensor x) {
  const std::size_t classes = x.shape().c;
  if (classes == 0) return x;
  auto v = x.values();
  for (std::size_t row = 0; row < v.size() / classes; ++row) {
    float* r = v.data() + row * classes;
    const float peak = *std::max_element(r, r + classes);
    float sum = 0.0f;
    for (std::size_t c = 0; c < classes; ++c) {
      r[c] = std::exp(r[c] - peak);
      sum += r[c];
    }
    for (std::size_t c = 0; c < classes; ++c) r[c] /= sum;
  }
  return x;
}

inline Tensor flatten(Tensor x) {
  const Shape s = x.shape();
  return std::move(x).reshaped(Shape{s.n, 1, 1, s.per_sample()});
}

// Inference-mode batch norm from moving statistics. An empty gamma means
// unit scale.
inline Tensor batch_norm(Tensor x, std::span<const float> gamma, std::span<const float> beta,
                         std::span<const float> mean, std::span<const float> var, float epsilon) {
  const std::size_t channels = x.shape().c;
  if (beta.size() != channels || mean.size() != channels || var.size() != channels ||
      (!gamma.empty() && gamma.size() != channels)) {
    fail(ErrorKind::kShape, "batch_norm: parameter length does not match ", channels,
         " channels");
  }
  auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t c = i % channels;
    const float g = gamma.empty() ? 1.0f : gamma[c];
    v[i] = g * (v[i] - mean[c]) / std::sqrt(var[c] + epsilon) + beta[c];
  }
  return x;
}

// Multiply-accumulate counts, used for the depthwise-separable cost model.
inline std::size_t conv2d_macs(std::size_t out_h, std::size_t out_w, std::size_t k,
                               std::size_t in_c, std::size_t out_c) {
  return out_h * out_w * k * k * in_c * out_c;
}

inline std::size_t depthwise_macs(std::size_t out_h, std::size_t out_w, std::size_t k,
                                  std::size_t channels) {
  return out_h * out_w * k * k * channels;
}

}  // namespace qdyn
