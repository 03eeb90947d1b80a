// Copyright 2026 The CPS Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// cps command line: runs experiments and inspects their outputs.

#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "cps/checkpoint.hpp"
#include "cps/config.hpp"
#include "cps/error.hpp"
#include "cps/experiment.hpp"
#include "cps/selection.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Continual learning by pruning a shared network into per-task subnetworks."};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress lines");

  std::string config_path, resume_path;
  auto* train = app.add_subcommand("train", "Learn every task of every configured class ordering");
  train->add_option("config", config_path, "Experiment config (JSON)")->required();
  train->add_option("--resume", resume_path, "Continue from a task checkpoint");

  std::string checkpoint_path, strategy = "maxoutput";
  cps::Index batch_size = 20;
  auto* eval = app.add_subcommand("eval", "Re-evaluate a checkpoint on its test data");
  eval->add_option("checkpoint", checkpoint_path, "Task checkpoint (.cpns)")->required();
  eval->add_option("--strategy", strategy, "Task selection: maxoutput, is or oracle")
      ->check(CLI::IsMember({"maxoutput", "is", "oracle"}));
  eval->add_option("--batch-size", batch_size, "Test batch size s")->check(CLI::PositiveNumber);

  std::string analyze_path;
  auto* analyze = app.add_subcommand("analyze", "Mask union, intersection and sharing histogram");
  analyze->add_option("checkpoint", analyze_path, "Task checkpoint (.cpns)")->required();

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Summarize every metrics.json below a directory");
  report->add_option("dir", report_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) {
      cps::ExperimentConfig config = cps::load_config(config_path);
      cps::RunOptions options;
      if (!resume_path.empty()) options.resume = resume_path;
      if (!quiet) options.log = &std::cerr;
      const cps::RunResult result = cps::run(config, options);
      std::cout << cps::report(result.directory);
    } else if (*eval) {
      const cps::Checkpoint c = cps::load_checkpoint(checkpoint_path);
      std::cout << cps::evaluate_checkpoint(c, cps::selection_strategy_from_string(strategy), batch_size);
    } else if (*analyze) {
      const cps::Checkpoint c = cps::load_checkpoint(analyze_path);
      std::cout << cps::mask_stats_json(cps::analyze_masks(c.model));
    } else if (*report) {
      std::cout << cps::report(report_dir);
    }
  } catch (const cps::Error& e) {
    std::cerr << "cps: " << cps::to_string(e.kind()) << " error: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "cps: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
