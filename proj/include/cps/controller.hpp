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
#include <vector>

#include "cps/data.hpp"
#include "cps/mask.hpp"
#include "cps/network.hpp"
#include "cps/optim.hpp"
#include "cps/pruning.hpp"

namespace cps {

/// What subnetwork t needs at inference, plus the selection-layer scores
/// measured on its training sample.
struct TaskEntry {
  TaskId id = kFree;
  std::vector<int> classes;
  TaskMaskSet mask;
  Head<float> head;
  NormState<float> norm;
  Eigen::MatrixXd selection_scores;  // classes x features, signed
  std::size_t newly_frozen = 0;
};

/// Registered tasks 1..T. Entries are immutable once added.
class TaskRegistry {
 public:
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  TaskId next_id() const noexcept { return static_cast<TaskId>(entries_.size() + 1); }
  bool contains(TaskId id) const noexcept { return id >= 1 && static_cast<std::size_t>(id) <= entries_.size(); }

  const TaskEntry& at(TaskId id) const;
  const std::vector<TaskEntry>& entries() const noexcept { return entries_; }
  std::vector<TaskMaskSet> masks() const;
  std::vector<TaskId> ids() const;

  /// Appends `entry`; its id must be next_id() and its classes must be
  /// disjoint from every registered task.
  void add(TaskEntry entry);

 private:
  std::vector<TaskEntry> entries_;
};

struct ContinualModel {
  Network<float> network;
  TaskRegistry registry;
};

enum class Variant { standard, frozen };
enum class ReinitMode { reinit, keep };

struct LearnConfig {
  OptimSpec optim;
  PruneConfig prune;
  int epochs = 10;
  Index batch_size = 32;
  Index selection_sample = 1000;  // training samples used for pruning and selection scores
  Variant variant = Variant::standard;
  ReinitMode reinit = ReinitMode::reinit;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Trains free parameters plus a new head, prunes, freezes the surviving
/// connections and registers the task. Returns its id.
TaskId learn_task(ContinualModel& model, const TaskSplit& task, const LearnConfig& config);

/// Shared-backbone variant: the first task trains (and freezes) the whole
/// backbone; later tasks train only their norm parameters and head.
TaskId learn_task_frozen_variant(ContinualModel& model, const TaskSplit& task, const LearnConfig& config);

/// Dispatches on config.variant.
TaskId learn(ContinualModel& model, const TaskSplit& task, const LearnConfig& config);

/// Backbone features and head logits of one subnetwork.
struct SubnetworkOutput {
  Matrix<float> features;
  Matrix<float> logits;
};

/// Samples are processed in fixed chunks so that a given input always takes
/// the same arithmetic path.
inline constexpr Index kEvalChunk = 256;

SubnetworkOutput run_subnetwork(const Network<float>& net, const TaskEntry& entry, const Tensor<float>& x);
SubnetworkOutput run_subnetwork(const ContinualModel& model, TaskId task, const Tensor<float>& x);

/// Logits of head t on mask t with task-t norm statistics.
Matrix<float> infer_subnetwork(const ContinualModel& model, TaskId task, const Tensor<float>& batch);

/// Global class predicted for each row of `logits` produced by `entry`.
std::vector<int> predict_classes(const TaskEntry& entry, const Matrix<float>& logits);

/// Fraction of `set` classified correctly when the task id is given.
double task_il_accuracy(const ContinualModel& model, TaskId task, const LabeledSet& set);

/// Seeded subsample (without replacement) of a task's training samples.
Tensor<float> selection_sample(const LabeledSet& train, Index size, std::uint64_t seed);

}  // namespace cps
