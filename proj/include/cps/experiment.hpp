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

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cps/checkpoint.hpp"
#include "cps/config.hpp"
#include "cps/metrics.hpp"

namespace cps {

/// One row per learned task.
struct HistoryRow {
  int task = 0;
  double free_params = 0;            // backbone scalars still unclaimed
  double newly_frozen = 0;
  double min_layer_free = 0;         // smallest free fraction over prunable weight tensors
  double task_il_diagonal = 0;       // R(t, t), task-IL
  double task_il_acc = 0;            // acc(R, t), task-IL
};

/// Evaluation results of one class ordering.
struct OrderingResult {
  std::uint64_t ordering_seed = 0;
  EvalMatrix task_il;
  std::map<std::string, EvalMatrix> class_il;         // keyed "<strategy>_bs<s>"
  std::map<std::string, Eigen::MatrixXd> selection;   // step x task selection accuracy, NaN above diagonal
  std::map<std::string, Eigen::MatrixXi> confusion;   // after the last step, true x chosen batch counts
  std::vector<HistoryRow> history;
  int completed = 0;
};

struct RunOptions {
  std::optional<std::string> resume;  // checkpoint to continue from
  bool write_checkpoints = true;
  std::ostream* log = nullptr;
};

struct RunResult {
  std::filesystem::path directory;
  std::vector<OrderingResult> orderings;
};

std::string selection_key(SelectionStrategy s, Index batch_size);

/// Learns every task of every configured ordering and evaluates after each
/// one. Results land under output_root(config).
RunResult run(const ExperimentConfig& config, const RunOptions& options = {});

/// Splits the configured dataset for one ordering.
TaskStream build_stream(const ExperimentConfig& config, const Dataset& data, std::uint64_t ordering_seed);

/// Free fraction of the least free prunable weight tensor.
double min_layer_free_fraction(const Network<float>& net);

struct LayerMaskStats {
  std::string layer;
  Index params = 0;
  double union_pct = 0;
  double intersection_pct = 0;
  std::vector<double> task_pct;  // density of each task's mask
};

struct MaskStats {
  std::vector<LayerMaskStats> layers;  // prunable layers, weight and bias together
  std::vector<double> histogram;       // h(k), k = 0..T, percent of backbone scalars in exactly k masks
};

MaskStats analyze_masks(const ContinualModel& model);
std::string mask_stats_json(const MaskStats& stats);

/// Re-evaluates a checkpoint on its recorded test data.
std::string evaluate_checkpoint(const Checkpoint& checkpoint, SelectionStrategy strategy, Index batch_size);

/// Summaries of every metrics.json found below `dir`.
std::string report(const std::filesystem::path& dir);

}  // namespace cps
