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

// Acceptance suite: one PASS/FAIL line per criterion. Every expected value
// comes from the double-precision oracles in oracles.hpp or from closed-form
// arithmetic written out here, never from library output.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "qdyn/experiment.hpp"
#include "test_util.hpp"

namespace {

namespace fs = std::filesystem;
using qdyn::Padding;
using qdyn::Shape;
using qdyn::Tensor;
using qdyn::WeightLayout;
using qdyn::WeightTensor;
using testing_util::max_abs_diff;
using testing_util::make_tensor;
using testing_util::to_float;

// Collects the first failure of a criterion; later checks still run so
// that the detail line reports counts.
class Verdict {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failure_.empty()) failure_ = what;
  }
  void note(const std::string& text) {
    if (!notes_.empty()) notes_ += "; ";
    notes_ += text;
  }
  bool passed() const { return failure_.empty(); }
  std::string detail() const {
    if (passed()) return notes_;
    return notes_.empty() ? failure_ : failure_ + " | " + notes_;
  }

 private:
  std::string failure_;
  std::string notes_;
};

template <typename... Args>
std::string str(const Args&... args) {
  std::ostringstream s;
  (s << ... << args);
  return s.str();
}

std::size_t to_size(int v) { return static_cast<std::size_t>(v); }

Shape to_shape(const oracle::Dims4& d) {
  return Shape{to_size(d.n), to_size(d.h), to_size(d.w), to_size(d.c)};
}

// ------------------------------------------------------------------ 1

void kernel_oracles(Verdict& v) {
  constexpr int kInstances = 60;
  constexpr double kTol = 1e-5;
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> dim(1, 9), kdim(1, 3), sdim(1, 2), cdim(1, 8), coin(0, 1);
  double worst = 0.0;
  auto record = [&](const char* op, int i, double err) {
    worst = std::max(worst, err);
    v.expect(err <= kTol, str(op, " instance ", i, " differs by ", err));
  };

  for (int i = 0; i < kInstances;) {
    const int k = kdim(rng), stride = sdim(rng), out_c = cdim(rng);
    const bool same = coin(rng) == 1;
    const oracle::Dims4 xd{1 + coin(rng), dim(rng), dim(rng), cdim(rng)};
    if (!same && (xd.h < k || xd.w < k)) continue;
    const auto x = oracle::random_vector(rng, to_size(xd.size()));
    const auto w = oracle::random_vector(rng, to_size(k * k * xd.c * out_c));
    const auto b = oracle::random_vector(rng, to_size(out_c));
    oracle::Dims4 od{};
    const auto expect = oracle::conv2d(x, xd, w, k, out_c, b, stride, same, &od);
    const Tensor y = qdyn::conv2d(
        make_tensor(xd, x),
        WeightTensor(WeightLayout::kConvHwio, {to_size(k), to_size(k), to_size(xd.c), to_size(out_c)}, to_float(w)),
        to_float(b), to_size(stride), same ? Padding::kSame : Padding::kValid);
    v.expect(y.shape() == to_shape(od), str("conv2d instance ", i, " has shape ", y.shape()));
    record("conv2d", i++, max_abs_diff(y.values(), expect));
  }
  for (int i = 0; i < kInstances;) {
    const int k = kdim(rng), stride = sdim(rng);
    const bool same = coin(rng) == 1;
    const oracle::Dims4 xd{1 + coin(rng), dim(rng), dim(rng), cdim(rng)};
    if (!same && (xd.h < k || xd.w < k)) continue;
    const auto x = oracle::random_vector(rng, to_size(xd.size()));
    const auto w = oracle::random_vector(rng, to_size(k * k * xd.c));
    const auto b = oracle::random_vector(rng, to_size(xd.c));
    oracle::Dims4 od{};
    const auto expect = oracle::depthwise(x, xd, w, k, b, stride, same, &od);
    const Tensor y = qdyn::depthwise_conv2d(
        make_tensor(xd, x),
        WeightTensor(WeightLayout::kDepthwiseHwc, {to_size(k), to_size(k), to_size(xd.c)}, to_float(w)),
        to_float(b), to_size(stride), same ? Padding::kSame : Padding::kValid);
    v.expect(y.shape() == to_shape(od), str("depthwise instance ", i, " has shape ", y.shape()));
    record("depthwise", i++, max_abs_diff(y.values(), expect));
  }
  for (int i = 0; i < kInstances; ++i) {
    const int rows = 1 + coin(rng) * 3, in = dim(rng) * 7, out = cdim(rng) * 3;
    const auto x = oracle::random_vector(rng, to_size(rows * in));
    const auto w = oracle::random_vector(rng, to_size(in * out));
    const auto b = oracle::random_vector(rng, to_size(out));
    const Tensor y = qdyn::dense(make_tensor({rows, 1, 1, in}, x),
                                 WeightTensor(WeightLayout::kDenseIo, {to_size(in), to_size(out)}, to_float(w)),
                                 to_float(b));
    record("dense", i, max_abs_diff(y.values(), oracle::matmul(x, rows, in, w, out, b)));
  }
  for (int i = 0; i < kInstances;) {
    const int k = 1 + coin(rng), stride = sdim(rng);
    const oracle::Dims4 xd{1 + coin(rng), dim(rng), dim(rng), cdim(rng)};
    if (xd.h < k || xd.w < k) continue;
    const auto x = oracle::random_vector(rng, to_size(xd.size()), -3.0, 3.0);
    const Tensor in = make_tensor(xd, x);
    oracle::Dims4 od{};
    const auto pooled = oracle::maxpool(x, xd, k, stride, &od);
    const Tensor y = qdyn::maxpool(in, to_size(k), to_size(stride));
    v.expect(y.shape() == to_shape(od), str("maxpool instance ", i, " has shape ", y.shape()));
    record("maxpool", i, max_abs_diff(y.values(), pooled));
    record("gap", i, max_abs_diff(qdyn::global_avg_pool(in).values(), oracle::global_avg_pool(x, xd)));
    std::vector<double> rectified = x;
    for (double& r : rectified) r = std::max(r, 0.0);
    record("relu", i, max_abs_diff(qdyn::relu(in).values(), rectified));
    std::vector<double> twice = x;
    for (double& t : twice) t *= 2.0;
    record("add", i, max_abs_diff(qdyn::add(in, in).values(), twice));
    record("softmax", i, max_abs_diff(qdyn::softmax(in).values(), oracle::softmax(x, xd.c)));
    const Tensor flat = qdyn::flatten(in);
    v.expect(flat.shape() == Shape{to_size(xd.n), 1, 1, to_size(xd.h * xd.w * xd.c)} &&
                 max_abs_diff(flat.values(), x) == 0.0,
             str("flatten instance ", i, " changed values or shape"));
    ++i;
  }
  v.note(str(kInstances, " instances each of conv2d, depthwise, dense, maxpool, gap, relu, add, "
                         "softmax, flatten; max |err| ",
             worst));
}

// ------------------------------------------------------------------ 2

void bn_fold_equivalence(Verdict& v) {
  constexpr int kLayers = 30;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pos(0.05, 3.0), any(-1.0, 1.0);
  int without_gamma = 0;
  double worst = 0.0;
  for (int layer = 0; layer < kLayers; ++layer) {
    const bool use_gamma = layer % 3 != 0;
    const bool depthwise = layer % 2 == 1;
    const int c_in = 1 + static_cast<int>(rng() % 8);
    const int c_out = depthwise ? c_in : 1 + static_cast<int>(rng() % 8);
    const oracle::Dims4 xd{2, 7, 7, c_in};
    const auto x = oracle::random_vector(rng, to_size(xd.size()));
    const auto w = oracle::random_vector(rng, to_size(9 * c_in * (depthwise ? 1 : c_out)));
    const auto bias = oracle::random_vector(rng, to_size(c_out));
    std::vector<double> gamma, beta(to_size(c_out)), mean(to_size(c_out)), var(to_size(c_out));
    if (use_gamma) gamma.resize(to_size(c_out));
    for (std::size_t c = 0; c < to_size(c_out); ++c) {
      if (use_gamma) gamma[c] = static_cast<float>(any(rng) * 2.0);
      beta[c] = static_cast<float>(any(rng));
      mean[c] = static_cast<float>(any(rng) * 0.5);
      var[c] = static_cast<float>(pos(rng));
    }
    const double eps = 1e-3;
    oracle::Dims4 od{};
    const auto raw = depthwise ? oracle::depthwise(x, xd, w, 3, bias, 1, true, &od)
                               : oracle::conv2d(x, xd, w, 3, c_out, bias, 1, true, &od);
    const auto expect = oracle::batch_norm(raw, c_out, gamma, beta, mean, var, eps);

    qdyn::BatchNormParams bn;
    bn.gamma = to_float(gamma);
    bn.beta = to_float(beta);
    bn.moving_mean = to_float(mean);
    bn.moving_var = to_float(var);
    bn.epsilon = static_cast<float>(eps);
    const WeightTensor wt =
        depthwise ? WeightTensor(WeightLayout::kDepthwiseHwc, {3, 3, to_size(c_in)}, to_float(w))
                  : WeightTensor(WeightLayout::kConvHwio, {3, 3, to_size(c_in), to_size(c_out)}, to_float(w));
    const std::vector<float> b = to_float(bias);
    const auto folded = qdyn::bn_fold(wt, bn, b);
    const Tensor in = make_tensor(xd, x);
    const Tensor y = depthwise ? qdyn::depthwise_conv2d(in, folded.weights, folded.bias, 1, Padding::kSame)
                               : qdyn::conv2d(in, folded.weights, folded.bias, 1, Padding::kSame);
    const double err = max_abs_diff(y.values(), expect);
    worst = std::max(worst, err);
    v.expect(err <= 1e-4, str("layer ", layer, " differs by ", err));
    if (!use_gamma) ++without_gamma;
  }
  v.note(str(kLayers, " conv/depthwise layers (", without_gamma, " without gamma); max |err| ", worst));
}

// ------------------------------------------------------------------ 3

void quantizer_properties(Verdict& v) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> lo_d(-1.0f, 0.0f), hi_d(0.0f, 1.0f), unit(0.0f, 1.0f);
  std::size_t samples = 0, ranges = 0;
  for (int r = 0; r < 250; ++r, ++ranges) {
    const float lo = lo_d(rng), hi = hi_d(rng);
    const qdyn::QuantParams p = qdyn::quant_params_from_range(lo, hi);
    // Closed form: a zero-containing range maps 0 onto an integer code.
    v.expect(qdyn::fake_quantize_value(0.0f, p) == 0.0f, str("zero not exact for [", lo, ", ", hi, "]"));
    const double expected_scale = (static_cast<double>(hi) - lo) / 255.0;
    v.expect(std::abs(p.scale - expected_scale) <= 1e-7 * std::max(1.0, expected_scale),
             str("scale ", p.scale, " for [", lo, ", ", hi, "]"));
    std::vector<float> xs(60);
    for (float& x : xs) x = lo + unit(rng) * (hi - lo);
    std::sort(xs.begin(), xs.end());
    for (std::size_t i = 0; i < xs.size(); ++i, ++samples) {
      const double err = std::abs(static_cast<double>(xs[i]) - qdyn::fake_quantize_value(xs[i], p));
      v.expect(err <= p.scale / 2.0 + 1e-7, str("round trip error ", err, " > scale/2 at ", xs[i]));
      if (i > 0) {
        v.expect(qdyn::quantize_value(xs[i - 1], p) <= qdyn::quantize_value(xs[i], p),
                 str("codes not monotone at ", xs[i]));
      }
    }
  }
  std::size_t weight_samples = 0;
  std::uniform_real_distribution<double> spread(0.01, 4.0);
  for (int t = 0; t < 40; ++t) {
    const std::size_t channels = 1 + rng() % 32;
    std::vector<double> scale(channels);
    for (double& s : scale) s = spread(rng);
    std::vector<double> w = oracle::random_vector(rng, 9 * 4 * channels);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(w[i] * scale[i % channels]);
    const WeightTensor wt(WeightLayout::kConvHwio, {3, 3, 4, channels}, to_float(w));
    const auto per_tensor = qdyn::quantize_weights_per_tensor(wt);
    const auto per_channel = qdyn::quantize_weights_per_channel(wt);
    for (std::size_t c = 0; c < channels; ++c) {
      v.expect(per_channel.params[c].scale <= per_tensor.params[0].scale,
               str("per-channel scale exceeds per-tensor scale at channel ", c));
    }
    weight_samples += w.size();
  }
  v.note(str(samples, " samples over ", ranges, " ranges: zero exact, |x - dq(q(x))| <= scale/2 + 1e-7, "
                      "monotone; per-channel scale <= per-tensor over ",
             weight_samples, " weights"));
  v.expect(samples >= 10000, "fewer than 1e4 samples");
}

// ------------------------------------------------------------------ 4

void average_precision(Verdict& v) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> channels(1, 64), k(1, 5);
  std::uniform_real_distribution<double> spread(0.0, 10.0);
  constexpr int kTensors = 150;
  double worst = 0.0;
  for (int t = 0; t < kTensors; ++t) {
    const auto c = to_size(channels(rng)), kk = to_size(k(rng));
    std::vector<double> w = oracle::random_vector(rng, kk * kk * 3 * c);
    const double s = spread(rng);
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] = static_cast<float>(w[i] * (1.0 + s * static_cast<double>(i % c) / static_cast<double>(c)));
    }
    const WeightTensor wt(WeightLayout::kConvHwio, {kk, kk, 3, c}, to_float(w));
    const double got = qdyn::weight_stats("w", 1, wt, qdyn::StatsKind::kWeights).average_precision;
    const double err = std::abs(got - oracle::average_precision(w, static_cast<int>(c)));
    worst = std::max(worst, err);
    v.expect(err <= 1e-6, str("tensor ", t, " differs by ", err));
  }
  const std::vector<float> ranges{0.1f, 0.1f, 0.1f, 2.0f};
  const float example = qdyn::average_precision(ranges, 2.0f);
  // (3 * 0.1 / 2 + 1) / 4 = 0.2875
  v.expect(example == static_cast<float>((3 * 0.05 + 1.0) / 4.0), str("{0.1,0.1,0.1,2.0} gave ", example));
  v.note(str(kTensors, " tensors, max |err| ", worst, "; {0.1,0.1,0.1,2.0} -> ", example));
}

// ------------------------------------------------------------------ 5

void information_theory(Verdict& v) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> lo(-2.0, 0.0), width(0.01, 3.0);
  constexpr int kPairs = 300;
  double min_kl = INFINITY, worst_split = 0.0;
  for (int t = 0; t < kPairs; ++t) {
    const double a0 = lo(rng), b0 = lo(rng);
    const auto a = to_float(oracle::random_vector(rng, 200 + rng() % 800, a0, a0 + width(rng)));
    const auto b = to_float(oracle::random_vector(rng, 200 + rng() % 800, b0, b0 + width(rng)));
    const auto [p, q] = qdyn::build_histogram(a, b);
    // Entropy recomputed here from the probabilities.
    double h = 0.0;
    for (double pi : p.probabilities) h -= pi * std::log(pi);
    const double kl = qdyn::qkl(p, q);
    min_kl = std::min(min_kl, kl);
    worst_split = std::max(worst_split, std::abs(qdyn::qce(p, q) - (h + kl)));
    v.expect(kl >= 0.0, str("pair ", t, ": qkl = ", kl));
    const auto [pp, pp2] = qdyn::build_histogram(a, a);
    v.expect(qdyn::qkl(pp, pp2) == 0.0, str("pair ", t, ": qkl(p, p) != 0"));
  }
  v.expect(worst_split <= 1e-9, str("|qce - (H + qkl)| = ", worst_split));
  std::vector<float> uniform;
  for (int i = 0; i < 256 * 4; ++i) uniform.push_back(static_cast<float>(i / 4));
  const auto [u, u2] = qdyn::build_histogram(uniform, uniform);
  const double ce = qdyn::qce(u, u2);
  v.expect(std::abs(ce - std::log(256.0)) <= 1e-9, str("uniform qce ", ce, " != ln 256"));
  v.note(str(kPairs, " histogram pairs: min qkl ", min_kl, ", max |qce - (H + qkl)| ", worst_split,
             "; uniform-256 qce - ln 256 = ", ce - std::log(256.0)));
}

// ------------------------------------------------------------------ 6

qdyn::ExperimentConfig mechanism_config(float sigma, qdyn::WeightMode mode, double percentile = 0.05) {
  qdyn::ExperimentConfig c;
  c.percentile = percentile;
  c.architecture = "toynet_dws";
  c.heterogeneity = sigma;
  c.weight_mode = mode;
  c.eval_size = 64;
  return c;
}

void mechanism(Verdict& v) {
  const float sigmas[] = {1.0f, 4.0f, 16.0f};
  std::vector<qdyn::QuantReport> reports;
  for (float s : sigmas) {
    reports.push_back(qdyn::run_experiment(mechanism_config(s, qdyn::WeightMode::kPerTensor)));
  }
  // Depthwise weight precision per sigma, one entry per depthwise layer.
  std::vector<std::vector<double>> dw_precision(3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (const qdyn::LayerStats& s : reports[i].weight_stats) {
      if (s.kind != qdyn::StatsKind::kWeights) continue;
      if (s.layer.rfind("dw", 0) == 0) dw_precision[i].push_back(s.average_precision);
    }
  }
  std::string ap_text;
  for (std::size_t l = 0; l < dw_precision[0].size(); ++l) {
    v.expect(dw_precision[0][l] > dw_precision[1][l] && dw_precision[1][l] > dw_precision[2][l],
             str("depthwise layer ", l + 1, " precision not strictly decreasing: ", dw_precision[0][l],
                 ", ", dw_precision[1][l], ", ", dw_precision[2][l]));
  }
  v.expect(!dw_precision[0].empty(), "no depthwise layers found");
  for (std::size_t i = 0; i < 3; ++i) ap_text += str(i ? "/" : "", qdyn::format("%.4f", dw_precision[i][0]));
  const auto& a = reports;
  v.expect(a[0].aggregate.qmse.mean < a[1].aggregate.qmse.mean && a[1].aggregate.qmse.mean < a[2].aggregate.qmse.mean,
           str("output qmse not strictly increasing: ", a[0].aggregate.qmse.mean, ", ",
               a[1].aggregate.qmse.mean, ", ", a[2].aggregate.qmse.mean));
  v.expect(a[0].aggregate.qkl.mean < a[1].aggregate.qkl.mean && a[1].aggregate.qkl.mean < a[2].aggregate.qkl.mean,
           str("output qkl not strictly increasing: ", a[0].aggregate.qkl.mean, ", ",
               a[1].aggregate.qkl.mean, ", ", a[2].aggregate.qkl.mean));
  const qdyn::QuantReport per_channel =
      qdyn::run_experiment(mechanism_config(16.0f, qdyn::WeightMode::kPerChannel));
  v.expect(per_channel.aggregate.qmse.mean < a[2].aggregate.qmse.mean,
           str("per-channel qmse ", per_channel.aggregate.qmse.mean, " >= per-tensor ",
               a[2].aggregate.qmse.mean, " at sigma 16"));
  v.expect(a[0].trials.size() == 5, "expected 5 trials");
  v.note(str("sigma 1/4/16: dw2 precision ", ap_text, ", qmse ",
             qdyn::format("%.3g/%.3g/%.3g", a[0].aggregate.qmse.mean, a[1].aggregate.qmse.mean, a[2].aggregate.qmse.mean),
             ", qkl ",
             qdyn::format("%.3g/%.3g/%.3g", a[0].aggregate.qkl.mean, a[1].aggregate.qkl.mean, a[2].aggregate.qkl.mean),
             "; per-channel qmse at 16 ", qdyn::format("%.3g", per_channel.aggregate.qmse.mean)));

  // Diagnostic only: the same comparison without activation clipping, where
  // weight rounding is not swamped by clipping error.
  const double unclipped_tensor =
      qdyn::run_experiment(mechanism_config(16.0f, qdyn::WeightMode::kPerTensor, 0.0)).aggregate.qmse.mean;
  const double unclipped_channel =
      qdyn::run_experiment(mechanism_config(16.0f, qdyn::WeightMode::kPerChannel, 0.0)).aggregate.qmse.mean;
  v.note(qdyn::format("diagnostic, percentile 0 at sigma 16: per-channel qmse %.3g vs per-tensor %.3g",
                      unclipped_channel, unclipped_tensor));
}

// ------------------------------------------------------------------ 7

void protocol(Verdict& v) {
  const fs::path root = fs::path(QDYN_TEST_TMP) / "acceptance";
  fs::remove_all(root);
  std::vector<std::string> first;
  for (const char* run : {"run1", "run2"}) {
    qdyn::ConfigOverrides flags;
    flags.out_dir = (root / run).string();
    const qdyn::ExperimentConfig c = qdyn::resolve_config(std::nullopt, flags, nullptr);
    const qdyn::AnalyzeOutput out = qdyn::cmd_analyze(c);
    const std::vector<qdyn::PlotInput> inputs{{"default", out.layerwise_csv}};
    qdyn::cmd_plot(inputs, "qmse", root / run / "qmse.svg");
    std::vector<std::string> files;
    for (const char* name : {"report.csv", "report.json", "layerwise.csv", "qmse.svg"}) {
      files.push_back(qdyn::read_text(root / run / name));
    }
    if (first.empty()) {
      first = files;
      v.expect(out.report.trials.size() == 5, str("default trials = ", out.report.trials.size()));
      v.expect(out.report.config.batch_size == 800, str("default batch = ", out.report.config.batch_size));
      std::istringstream table(files[0]);
      std::string header, row;
      std::getline(table, header);
      std::getline(table, row);
      v.expect(header == "Network Architecture,FP32 Acc (%),QUINT8 Acc (%),QMSE,QCE,QKL-Div,Percent Acc Decrease",
               "table header: " + header);
      const auto cells = qdyn::parse_csv_line(row);
      v.expect(cells.size() == 7, str("table row has ", cells.size(), " cells"));
      for (std::size_t i = 1; i < cells.size(); ++i) {
        v.expect(cells[i].find(" ± ") != std::string::npos, "cell without mean ± std: " + cells[i]);
      }
      v.expect(files[3].rfind("<svg", 0) == 0 && files[3].find("<polyline") != std::string::npos,
               "plot is not an SVG line chart");
    } else {
      for (std::size_t i = 0; i < files.size(); ++i) {
        v.expect(files[i] == first[i], str("rerun differs in file ", i));
      }
    }
  }
  v.note("defaults: 5 trials x 800 calibration images from the synthetic pool; table header and "
         "mean ± std cells; SVG plot; report.csv, report.json, layerwise.csv and SVG byte-identical "
         "across reruns");
}

// ------------------------------------------------------------------ 8

void architecture(Verdict& v) {
  const qdyn::ModelGraph toy = qdyn::build_toynet(qdyn::ConvKind::kRegular, {});
  std::vector<std::vector<std::size_t>> conv_shapes;
  for (const auto& l : toy.layers) {
    if (std::holds_alternative<qdyn::layer::Conv2D>(l.spec)) conv_shapes.push_back(l.weights->dims());
  }
  const std::vector<std::vector<std::size_t>> expected{
      {3, 3, 3, 32}, {3, 3, 32, 64}, {3, 3, 64, 128}, {3, 3, 128, 256}, {3, 3, 256, 256}};
  v.expect(conv_shapes == expected, "ToyNet conv weight shapes differ");

  const qdyn::ModelGraph mobile = qdyn::build_mobilenet_v1_cifar({});
  const auto shapes = mobile.infer_shapes(1);
  Shape gap_in{};
  for (std::size_t i = 0; i < mobile.layers.size(); ++i) {
    if (std::holds_alternative<qdyn::layer::GlobalAvgPool>(mobile.layers[i].spec)) gap_in = shapes[i - 1];
  }
  v.expect(gap_in == Shape{1, 4, 4, 1024}, str("MobileNet GAP input ", gap_in));

  const qdyn::ModelGraph resnet = qdyn::build_resnet34_cifar({});
  std::vector<std::size_t> projections;
  std::size_t ordinal = 0;
  for (const auto& l : resnet.layers) {
    if (!qdyn::is_weighted(l.spec)) continue;
    ++ordinal;
    if (const auto* c = std::get_if<qdyn::layer::Conv2D>(&l.spec); c && c->k == 1) projections.push_back(ordinal);
  }
  v.expect(projections == std::vector<std::size_t>{10, 19, 32}, "ResNet projection indices differ");
  v.note(str("ToyNet conv weights [3,3,3,32]..[3,3,256,256]; MobileNet GAP input ", gap_in.h, "x", gap_in.w,
             "x", gap_in.c, "; ResNet projections at ", projections.size() == 3 ? "10/19/32" : "?"));
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<void(Verdict&)> run;
    // Set when the criterion is known to fail for a documented reason. The
    // line still reads FAIL; only the exit status tolerates it. A marked
    // criterion that starts passing fails the run so the mark is removed.
    const char* known_failure = nullptr;
  };
  const Criterion criteria[] = {
      {"kernel oracles", kernel_oracles},
      {"batch-norm fold equivalence", bn_fold_equivalence},
      {"quantizer properties", quantizer_properties},
      {"average precision", average_precision},
      {"information measures", information_theory},
      {"heterogeneity mechanism", mechanism,
       "with 5% per-tail activation clipping, clipping error dominates and per-channel weights do "
       "not reliably lower output QMSE (see README)"},
      {"analysis protocol", protocol},
      {"architectures", architecture},
  };
  int failures = 0;
  for (std::size_t i = 0; i < std::size(criteria); ++i) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      criteria[i].run(v);
    } catch (const std::exception& e) {
      v.expect(false, std::string("exception: ") + e.what());
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const char* known = criteria[i].known_failure;
    std::string detail = v.detail();
    if (known != nullptr) {
      detail += v.passed() ? " [marked as a known failure but passed; remove the mark]"
                           : std::string(" [known failure: ") + known + "]";
    }
    if (v.passed() == (known != nullptr)) ++failures;
    std::printf("%s criterion %zu (%s, %.1fs): %s\n", v.passed() ? "PASS" : "FAIL", i + 1,
                criteria[i].name, seconds, detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
