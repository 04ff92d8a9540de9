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

// Experiment configuration and the build / analyze / plot / grid commands.
// Settings resolve as: command-line flag > config file > QDYN_SEED (seed
// only) > built-in default.

#include <atomic>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "qdyn/analysis.hpp"
#include "qdyn/data.hpp"
#include "qdyn/model.hpp"
#include "qdyn/report.hpp"
#include "qdyn/serialize.hpp"

namespace qdyn {

inline constexpr std::string_view kArchitectures[] = {"toynet_regular", "toynet_dws",
                                                      "mobilenet_v1_cifar", "resnet34_cifar"};

inline void check_architecture(std::string_view name) {
  for (std::string_view a : kArchitectures) {
    if (a == name) return;
  }
  fail(ErrorKind::kUsage, "unknown architecture '", name,
       "' (expected toynet_regular, toynet_dws, mobilenet_v1_cifar or resnet34_cifar)");
}

// Architectures named in a grid configuration: one name or a comma list.
inline std::vector<std::string> grid_architectures(std::string_view list) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= list.size()) {
    std::size_t end = list.find(',', pos);
    if (end == std::string_view::npos) end = list.size();
    std::string name(list.substr(pos, end - pos));
    check_architecture(name);
    out.push_back(std::move(name));
    pos = end + 1;
  }
  return out;
}

struct ExperimentConfig {
  std::string architecture = "toynet_regular";
  Init init = Init::kGlorotUniform;
  bool use_gamma = true;
  float heterogeneity = 1.0f;
  std::size_t trials = 5;
  std::size_t calib_batch = 800;
  double percentile = kDefaultPercentile;
  WeightMode weight_mode = WeightMode::kPerTensor;
  std::uint64_t seed = 0;
  std::string data;        // CIFAR-10 calibration data; empty = synthetic
  std::string eval_data;   // CIFAR-10 evaluation data; empty = taken from `data`
  std::size_t pool_size = 0;  // synthetic calibration pool; 0 = max(2000, calib_batch)
  std::size_t eval_size = 256;
  std::string model;       // saved manifest to analyze instead of building
  std::string out_dir = "qdyn_out";
  std::size_t jobs = 1;
};

// Every setting a flag or config file may supply.
struct ConfigOverrides {
  std::optional<std::string> architecture;
  std::optional<std::string> init;
  std::optional<bool> use_gamma;
  std::optional<float> heterogeneity;
  std::optional<std::size_t> trials;
  std::optional<std::size_t> calib_batch;
  std::optional<double> percentile;
  std::optional<std::string> weight_mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> data;
  std::optional<std::string> eval_data;
  std::optional<std::size_t> pool_size;
  std::optional<std::size_t> eval_size;
  std::optional<std::string> model;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> jobs;
};

namespace detail {

template <typename T>
std::optional<T> json_field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) return std::nullopt;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::kParse, "config key '", key, "' has the wrong type");
  }
}

template <typename T>
void apply(T& target, const std::optional<T>& value) {
  if (value) target = *value;
}

inline std::uint64_t parse_seed(std::string_view text, std::string_view source) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    fail(ErrorKind::kUsage, source, " must be an unsigned integer, got '", text, "'");
  }
  return v;
}

}  // namespace detail

inline ConfigOverrides parse_config_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, "config file is not valid JSON: ", e.what());
  }
  if (!j.is_object()) fail(ErrorKind::kParse, "config file must hold a JSON object");
  static constexpr std::string_view kKeys[] = {
      "architecture", "init",      "use_gamma", "heterogeneity", "trials",    "calib_batch",
      "percentile",   "weight_mode", "seed",    "data",          "eval_data", "pool_size",
      "eval_size",    "model",     "out_dir",   "jobs"};
  for (const auto& item : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), item.key()) == std::end(kKeys)) {
      fail(ErrorKind::kParse, "unknown config key '", item.key(), "'");
    }
  }
  using detail::json_field;
  ConfigOverrides o;
  o.architecture = json_field<std::string>(j, "architecture");
  o.init = json_field<std::string>(j, "init");
  o.use_gamma = json_field<bool>(j, "use_gamma");
  o.heterogeneity = json_field<float>(j, "heterogeneity");
  o.trials = json_field<std::size_t>(j, "trials");
  o.calib_batch = json_field<std::size_t>(j, "calib_batch");
  o.percentile = json_field<double>(j, "percentile");
  o.weight_mode = json_field<std::string>(j, "weight_mode");
  o.seed = json_field<std::uint64_t>(j, "seed");
  o.data = json_field<std::string>(j, "data");
  o.eval_data = json_field<std::string>(j, "eval_data");
  o.pool_size = json_field<std::size_t>(j, "pool_size");
  o.eval_size = json_field<std::size_t>(j, "eval_size");
  o.model = json_field<std::string>(j, "model");
  o.out_dir = json_field<std::string>(j, "out_dir");
  o.jobs = json_field<std::size_t>(j, "jobs");
  return o;
}

inline void validate(const ExperimentConfig& c) {
  grid_architectures(c.architecture);
  if (!(c.heterogeneity >= 1.0f) || !std::isfinite(c.heterogeneity)) {
    fail(ErrorKind::kUsage, "heterogeneity must be a finite value >= 1, got ", c.heterogeneity);
  }
  if (c.trials == 0) fail(ErrorKind::kUsage, "trials must be >= 1");
  if (c.calib_batch == 0) fail(ErrorKind::kUsage, "calib-batch must be >= 1");
  if (!(c.percentile >= 0.0 && c.percentile < 0.5)) {
    fail(ErrorKind::kUsage, "percentile must lie in [0, 0.5), got ", c.percentile);
  }
  if (c.eval_size == 0) fail(ErrorKind::kUsage, "eval-size must be >= 1");
  if (c.jobs == 0) fail(ErrorKind::kUsage, "jobs must be >= 1");
}

// Layers file settings over defaults, then the seed environment fallback,
// then flags.
inline ExperimentConfig resolve_config(const std::optional<ConfigOverrides>& file,
                                       const ConfigOverrides& flags,
                                       const char* env_seed = std::getenv("QDYN_SEED")) {
  ExperimentConfig c;
  if (env_seed != nullptr && *env_seed != '\0' && !flags.seed && !(file && file->seed)) {
    c.seed = detail::parse_seed(env_seed, "QDYN_SEED");
  }
  for (const ConfigOverrides* o : {file ? &*file : nullptr, &flags}) {
    if (o == nullptr) continue;
    using detail::apply;
    apply(c.architecture, o->architecture);
    if (o->init) c.init = parse_init(*o->init);
    apply(c.use_gamma, o->use_gamma);
    apply(c.heterogeneity, o->heterogeneity);
    apply(c.trials, o->trials);
    apply(c.calib_batch, o->calib_batch);
    apply(c.percentile, o->percentile);
    if (o->weight_mode) c.weight_mode = parse_weight_mode(*o->weight_mode);
    apply(c.seed, o->seed);
    apply(c.data, o->data);
    apply(c.eval_data, o->eval_data);
    apply(c.pool_size, o->pool_size);
    apply(c.eval_size, o->eval_size);
    apply(c.model, o->model);
    apply(c.out_dir, o->out_dir);
    apply(c.jobs, o->jobs);
  }
  validate(c);
  return c;
}

inline ConfigOverrides load_config_file(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  return parse_config_json(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

inline ModelGraph build_architecture(const ExperimentConfig& c) {
  check_architecture(c.architecture);
  BuildOptions o;
  o.use_gamma = c.use_gamma;
  o.init = c.init;
  o.seed = c.seed;
  o.heterogeneity = c.heterogeneity;
  if (c.architecture == "toynet_regular") return build_toynet(ConvKind::kRegular, o);
  if (c.architecture == "toynet_dws") return build_toynet(ConvKind::kDws, o);
  if (c.architecture == "mobilenet_v1_cifar") return build_mobilenet_v1_cifar(o);
  return build_resnet34_cifar(o);
}

// Row name of one experiment cell, e.g. "DWS-Conv-With-Gamma-GlorotUni".
// Non-default heterogeneity and weight mode are appended.
inline std::string cell_name(const ExperimentConfig& c) {
  std::string name;
  if (c.architecture == "toynet_regular") name = "Regular-Conv";
  else if (c.architecture == "toynet_dws") name = "DWS-Conv";
  else if (c.architecture == "mobilenet_v1_cifar") name = "MobileNet-V1";
  else name = "ResNet-34";
  name += c.use_gamma ? "-With-Gamma" : "-No-Gamma";
  name += c.init == Init::kGlorotUniform ? "-GlorotUni" : "-HeNormal";
  if (c.heterogeneity != 1.0f) name += "-Sigma" + format("%g", static_cast<double>(c.heterogeneity));
  if (c.weight_mode == WeightMode::kPerChannel) name += "-PerChannel";
  return name;
}

// Manifest path -> blob path ("model.json" -> "model.bin").
inline std::filesystem::path blob_path_for(std::filesystem::path manifest) {
  return manifest.replace_extension(".bin");
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  detail::write_bytes(path, std::span<const std::uint8_t>(
                                reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create directory '", dir.string(), "': ", ec.message());
}

struct ExperimentData {
  Dataset calibration;
  Dataset evaluation;
};

// Synthetic pools are derived from the seed; CIFAR-10 evaluation falls back
// to the leading images of the calibration data.
inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  ExperimentData d;
  if (c.data.empty()) {
    const std::size_t pool = c.pool_size == 0 ? std::max<std::size_t>(2000, c.calib_batch) : c.pool_size;
    d.calibration = make_synthetic_dataset(pool, mix_seed(c.seed, 0x5eed0001));
    d.evaluation = make_synthetic_dataset(c.eval_size, mix_seed(c.seed, 0x5eed0002));
    return d;
  }
  d.calibration = read_cifar10_binary(c.data);
  if (!c.eval_data.empty()) {
    d.evaluation = read_cifar10_binary(c.eval_data);
  } else {
    const std::size_t n = std::min(c.eval_size, d.calibration.size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    d.evaluation.images = gather_samples(d.calibration.images, idx);
    d.evaluation.labels.assign(d.calibration.labels.begin(),
                               d.calibration.labels.begin() + static_cast<std::ptrdiff_t>(n));
  }
  if (d.evaluation.size() > c.eval_size) {
    std::vector<std::size_t> idx(c.eval_size);
    std::iota(idx.begin(), idx.end(), 0);
    Dataset trimmed;
    trimmed.images = gather_samples(d.evaluation.images, idx);
    trimmed.labels.assign(d.evaluation.labels.begin(),
                          d.evaluation.labels.begin() + static_cast<std::ptrdiff_t>(c.eval_size));
    d.evaluation = std::move(trimmed);
  }
  return d;
}

inline TrialConfig trial_config(const ExperimentConfig& c) {
  TrialConfig t;
  t.trials = c.trials;
  t.batch_size = c.calib_batch;
  t.percentile = c.percentile;
  t.seed = c.seed;
  t.weight_mode = c.weight_mode;
  return t;
}

// ---------------------------------------------------------------------------
// Commands.

struct BuildOutput {
  std::filesystem::path manifest;
  std::filesystem::path blob;
};

inline BuildOutput cmd_build(const ExperimentConfig& c) {
  const ModelGraph model = build_architecture(c);
  ensure_dir(c.out_dir);
  BuildOutput out{std::filesystem::path(c.out_dir) / (c.architecture + ".json"),
                  std::filesystem::path(c.out_dir) / (c.architecture + ".bin")};
  save_model(model, out.manifest, out.blob);
  return out;
}

struct AnalyzeOutput {
  QuantReport report;
  std::filesystem::path table_csv;
  std::filesystem::path json;
  std::filesystem::path layerwise_csv;
};

inline QuantReport run_experiment(const ExperimentConfig& c) {
  const ModelGraph model = c.model.empty() ? build_architecture(c)
                                           : load_model(c.model, blob_path_for(c.model));
  const ExperimentData data = load_experiment_data(c);
  return run_trials(model, data.calibration, data.evaluation, trial_config(c), cell_name(c));
}

inline AnalyzeOutput write_report(QuantReport report, const std::filesystem::path& dir) {
  ensure_dir(dir);
  AnalyzeOutput out{std::move(report), dir / "report.csv", dir / "report.json",
                    dir / "layerwise.csv"};
  write_text(out.table_csv, table_csv(out.report));
  write_text(out.json, report_json(out.report));
  write_text(out.layerwise_csv, layerwise_csv(out.report));
  return out;
}

inline AnalyzeOutput cmd_analyze(const ExperimentConfig& c) {
  return write_report(run_experiment(c), c.out_dir);
}

struct PlotInput {
  std::string label;
  std::filesystem::path csv;
};

// "label=path" or plain "path" (label = file stem, or parent directory name
// when the stem is the default "layerwise").
inline PlotInput parse_plot_input(std::string_view spec) {
  PlotInput in;
  const std::size_t eq = spec.find('=');
  if (eq != std::string_view::npos) {
    in.label = std::string(spec.substr(0, eq));
    in.csv = std::string(spec.substr(eq + 1));
  } else {
    in.csv = std::string(spec);
    in.label = in.csv.stem().string();
    if (in.label == "layerwise" && in.csv.has_parent_path()) {
      in.label = in.csv.parent_path().filename().string();
    }
  }
  if (in.csv.empty()) fail(ErrorKind::kUsage, "plot input '", spec, "' names no file");
  return in;
}

inline std::string cmd_plot(std::span<const PlotInput> inputs, std::string_view metric,
                            const std::filesystem::path& out_svg) {
  if (!is_layerwise_metric(metric)) fail(ErrorKind::kUsage, "unknown metric '", metric, "'");
  std::vector<PlotSeries> series;
  for (const PlotInput& in : inputs) {
    const std::vector<LayerwiseRow> rows = parse_layerwise_csv(read_text(in.csv));
    series.push_back(layerwise_series(in.label, rows, metric));
  }
  std::string svg = render_svg(series, metric);
  if (out_svg.has_parent_path()) ensure_dir(out_svg.parent_path());
  write_text(out_svg, svg);
  return svg;
}

inline std::vector<ExperimentConfig> grid_cells(const ExperimentConfig& base) {
  std::vector<ExperimentConfig> cells;
  for (const std::string& arch : grid_architectures(base.architecture)) {
    for (bool gamma : {true, false}) {
      for (Init init : {Init::kGlorotUniform, Init::kHeNormal}) {
        ExperimentConfig c = base;
        c.architecture = arch;
        c.use_gamma = gamma;
        c.init = init;
        c.out_dir = (std::filesystem::path(base.out_dir) / cell_name(c)).string();
        cells.push_back(std::move(c));
      }
    }
  }
  return cells;
}

struct GridOutput {
  std::vector<QuantReport> reports;  // in cell order
  std::filesystem::path table_csv;
};

// Cells run on up to `jobs` threads; each writes its own directory and the
// combined table is assembled afterwards in cell order.
inline GridOutput cmd_grid(const ExperimentConfig& base) {
  if (!base.model.empty()) fail(ErrorKind::kUsage, "grid builds its own models; drop --model");
  const std::vector<ExperimentConfig> cells = grid_cells(base);
  std::vector<std::optional<QuantReport>> reports(cells.size());
  std::vector<std::optional<Error>> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        reports[i] = write_report(run_experiment(cells[i]), cells[i].out_dir).report;
      } catch (const Error& e) {
        errors[i] = e;
      }
    }
  };
  const std::size_t jobs = std::min(base.jobs, cells.size());
  if (jobs <= 1) {
    worker();
  } else {
    const std::size_t saved = worker_limit();
    worker_limit() = 1;  // cell-level parallelism replaces sample-level
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < jobs; ++t) threads.emplace_back(worker);
    for (auto& th : threads) th.join();
    worker_limit() = saved;
  }
  for (const auto& e : errors) {
    if (e) throw *e;  // lowest failing cell, independent of scheduling
  }
  GridOutput out;
  for (auto& r : reports) out.reports.push_back(std::move(*r));
  ensure_dir(base.out_dir);
  out.table_csv = std::filesystem::path(base.out_dir) / "grid.csv";
  write_text(out.table_csv, table_csv(out.reports));
  return out;
}

}  // namespace qdyn
