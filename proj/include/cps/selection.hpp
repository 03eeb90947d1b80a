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

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cps/controller.hpp"

namespace cps {

enum class SelectionStrategy { maxoutput, importance_scores, oracle };

std::string to_string(SelectionStrategy s);
SelectionStrategy selection_strategy_from_string(const std::string& name);

struct SelectionReport {
  TaskId task = kFree;
  std::vector<double> statistic;  // one per registered task, in id order
  std::vector<int> labels;        // global classes predicted by the chosen head
};

/// Highest summed max-logit wins. Ties go to the lowest task id.
SelectionReport select_maxoutput(const ContinualModel& model, const Tensor<float>& batch);

/// Signed mean of w_ij * feature_i over the batch for head t.
Eigen::MatrixXd test_importance_scores(const ContinualModel& model, TaskId task, const Tensor<float>& batch);

/// Smallest Frobenius distance between stored and test-estimated scores wins.
SelectionReport select_importance_scores(const ContinualModel& model, const Tensor<float>& batch);

SelectionReport select(const ContinualModel& model, const Tensor<float>& batch, SelectionStrategy strategy,
                       TaskId truth = kFree);

/// Per-task outputs for one sample set, so that many batches can be scored
/// without recomputing the forward passes.
struct CachedOutputs {
  std::vector<SubnetworkOutput> per_task;  // index t-1
};

CachedOutputs cache_outputs(const ContinualModel& model, const Tensor<float>& x);

/// Selection on rows `rows` of a cached sample set.
SelectionReport select_cached(const ContinualModel& model, const CachedOutputs& cache, std::span<const Index> rows,
                              SelectionStrategy strategy, TaskId truth = kFree);

struct StreamResult {
  std::vector<double> class_il_accuracy;   // per evaluated task
  std::vector<double> selection_accuracy;  // fraction of batches routed to the right task
  Eigen::MatrixXi confusion;               // true task x chosen task, batch counts
  std::size_t batches = 0;
};

/// Splits each task's test set into seeded batches of `batch_size`, selects a
/// subnetwork per batch and classifies with it. Tasks must be registered and
/// listed in id order starting at 1.
StreamResult classify_stream(const ContinualModel& model, std::span<const TaskSplit> tasks, Index batch_size,
                             SelectionStrategy strategy, std::uint64_t seed);

}  // namespace cps
