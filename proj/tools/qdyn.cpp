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

// qdyn: build models, run quantization analyses, plot layerwise metrics and
// sweep the init x gamma ablation grid.
//
// Errors print one line "error: <kind>: <message>" to stderr and exit 1
// (2 for command-line usage errors).

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "qdyn/experiment.hpp"

namespace {

struct ExperimentFlags {
  std::string config;
  qdyn::ConfigOverrides values;
  bool gamma = false;
  bool no_gamma = false;
};

void add_experiment_flags(CLI::App* cmd, ExperimentFlags& f, bool grid) {
  cmd->add_option("--config", f.config, "JSON config file (flags take precedence)");
  cmd->add_option("--arch", f.values.architecture,
                  grid ? "architecture, or comma-separated list of architectures"
                       : "toynet_regular | toynet_dws | mobilenet_v1_cifar | resnet34_cifar");
  if (!grid) {
    cmd->add_option("--init", f.values.init, "glorot_uniform | he_normal");
    auto* g = cmd->add_flag("--gamma", f.gamma, "BatchNorm layers carry a gamma scale");
    auto* ng = cmd->add_flag("--no-gamma", f.no_gamma, "BatchNorm layers omit gamma");
    g->excludes(ng);
  }
  cmd->add_option("--heterogeneity", f.values.heterogeneity,
                  "depthwise channel scale spread sigma_s (>= 1)");
  cmd->add_option("--trials", f.values.trials, "calibration trials");
  cmd->add_option("--calib-batch", f.values.calib_batch, "calibration batch size");
  cmd->add_option("--percentile", f.values.percentile, "clipping percentile per tail");
  cmd->add_option("--weight-mode", f.values.weight_mode, "per_tensor | per_channel");
  cmd->add_option("--seed", f.values.seed, "experiment seed (fallback: QDYN_SEED)");
  cmd->add_option("--data", f.values.data, "CIFAR-10 binary file or directory (default: synthetic)");
  cmd->add_option("--eval-data", f.values.eval_data, "CIFAR-10 evaluation file or directory");
  cmd->add_option("--pool-size", f.values.pool_size, "synthetic calibration pool size");
  cmd->add_option("--eval-size", f.values.eval_size, "evaluation images");
  if (!grid) cmd->add_option("--model", f.values.model, "saved model manifest to analyze");
  cmd->add_option("--out-dir", f.values.out_dir, "output directory");
  if (grid) cmd->add_option("--jobs", f.values.jobs, "grid cells run in parallel");
}

qdyn::ExperimentConfig resolve(ExperimentFlags& f) {
  if (f.gamma) f.values.use_gamma = true;
  if (f.no_gamma) f.values.use_gamma = false;
  std::optional<qdyn::ConfigOverrides> file;
  if (!f.config.empty()) file = qdyn::load_config_file(f.config);
  return qdyn::resolve_config(file, f.values);
}

std::string one_line(std::string text) {
  for (char& c : text) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulated 8-bit post-training quantization and distribution dynamics of CNNs"};
  app.require_subcommand(1);

  ExperimentFlags build_flags, analyze_flags, grid_flags;
  auto* build = app.add_subcommand("build", "build a model and write its manifest and weight blob");
  add_experiment_flags(build, build_flags, false);
  auto* analyze = app.add_subcommand("analyze", "run calibration trials and write reports");
  add_experiment_flags(analyze, analyze_flags, false);
  auto* grid = app.add_subcommand("grid", "run the init x gamma ablation grid");
  add_experiment_flags(grid, grid_flags, true);

  std::vector<std::string> plot_inputs;
  std::string plot_metric = "qmse";
  std::string plot_out;
  auto* plot = app.add_subcommand("plot", "draw layerwise mean +/- std curves as SVG");
  plot->add_option("--input", plot_inputs, "layerwise CSV, optionally as label=path (repeatable)")
      ->required();
  plot->add_option("--metric", plot_metric, "metric to plot");
  plot->add_option("--out", plot_out, "output SVG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (build->parsed()) {
      const auto out = qdyn::cmd_build(resolve(build_flags));
      std::cout << "wrote " << out.manifest.string() << "\n"
                << "wrote " << out.blob.string() << "\n";
    } else if (analyze->parsed()) {
      const auto out = qdyn::cmd_analyze(resolve(analyze_flags));
      std::cout << "wrote " << out.table_csv.string() << "\n"
                << "wrote " << out.json.string() << "\n"
                << "wrote " << out.layerwise_csv.string() << "\n";
    } else if (grid->parsed()) {
      const auto out = qdyn::cmd_grid(resolve(grid_flags));
      std::cout << "wrote " << out.table_csv.string() << "\n";
    } else if (plot->parsed()) {
      std::vector<qdyn::PlotInput> inputs;
      for (const std::string& spec : plot_inputs) inputs.push_back(qdyn::parse_plot_input(spec));
      qdyn::cmd_plot(inputs, plot_metric, plot_out);
      std::cout << "wrote " << plot_out << "\n";
    }
  } catch (const qdyn::Error& e) {
    std::cerr << "error: " << qdyn::error_kind_name(e.kind()) << ": " << one_line(e.what())
              << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
