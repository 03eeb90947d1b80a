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

#include "cps/controller.hpp"

#include <algorithm>
#include <set>
#include <string>

#include "cps/error.hpp"
#include "cps/forward.hpp"
#include "cps/importance.hpp"
#include "cps/rng.hpp"

namespace cps {
namespace {

enum SeedTag : std::uint64_t { kTrainStream = 1, kReinit = 2, kSample = 3 };

void require_disjoint(const TaskRegistry& registry, const TaskSplit& task) {
  if (task.classes.empty()) throw InputError("task has no classes");
  std::set<int> seen(task.classes.begin(), task.classes.end());
  if (seen.size() != task.classes.size()) throw InputError("task lists a class twice");
  for (const auto& e : registry.entries()) {
    for (int c : e.classes) {
      if (seen.count(c)) {
        throw InputError("class " + std::to_string(c) + " already belongs to task " + std::to_string(e.id));
      }
    }
  }
}

Eigen::MatrixXd selection_scores(const Network<float>& net, const TaskEntry& entry, const Tensor<float>& sample) {
  const SubnetworkOutput out = run_subnetwork(net, entry, sample);
  return signed_contribution_scores(entry.head.weight, out.features);
}

struct TaskSetup {
  TaskEntry entry;
  std::vector<int> labels;
  Rng rng;
};

TaskSetup begin_task(const ContinualModel& model, const TaskSplit& task, const LearnConfig& config) {
  config.validate();
  require_disjoint(model.registry, task);
  if (task.train.size() < 2) throw InputError("task needs at least two training samples");
  const TaskId id = model.registry.next_id();
  TaskSetup s{TaskEntry{}, task.local_labels(task.train),
              Rng(derive_seed(config.seed, {static_cast<std::uint64_t>(id), kTrainStream}))};
  s.entry.id = id;
  s.entry.classes = task.classes;
  s.entry.head = Head<float>::init(static_cast<Index>(task.classes.size()), model.network.feature_dim(), s.rng);
  s.entry.norm = NormState<float>::fresh(model.network);
  return s;
}

}  // namespace

const TaskEntry& TaskRegistry::at(TaskId id) const {
  if (!contains(id)) throw InputError("task " + std::to_string(id) + " is not registered");
  return entries_[static_cast<std::size_t>(id - 1)];
}

std::vector<TaskMaskSet> TaskRegistry::masks() const {
  std::vector<TaskMaskSet> out;
  for (const auto& e : entries_) out.push_back(e.mask);
  return out;
}

std::vector<TaskId> TaskRegistry::ids() const {
  std::vector<TaskId> out;
  for (const auto& e : entries_) out.push_back(e.id);
  return out;
}

void TaskRegistry::add(TaskEntry entry) {
  if (entry.id != next_id()) {
    throw StateError("task " + std::to_string(entry.id) + " registered out of order; expected " + std::to_string(next_id()));
  }
  std::set<int> seen;
  for (const auto& e : entries_) seen.insert(e.classes.begin(), e.classes.end());
  for (int c : entry.classes) {
    if (!seen.insert(c).second) throw InputError("class " + std::to_string(c) + " registered twice");
  }
  if (!entries_.empty() && !entry.mask.same_layout(entries_.front().mask)) throw StructuralError("mask layout differs");
  entries_.push_back(std::move(entry));
}

void LearnConfig::validate() const {
  optim.validate();
  prune.validate();
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (selection_sample < 1) throw ConfigError("selection sample size must be positive");
}

Tensor<float> selection_sample(const LabeledSet& train, Index size, std::uint64_t seed) {
  Rng rng(seed);
  auto order = rng.permutation<Index>(static_cast<std::size_t>(train.size()));
  order.resize(static_cast<std::size_t>(std::min(size, train.size())));
  return train.x.gather(order);
}

TaskId learn_task(ContinualModel& model, const TaskSplit& task, const LearnConfig& config) {
  TaskSetup s = begin_task(model, task, config);
  Network<float>& net = model.network;
  const TaskId id = s.entry.id;
  const TaskMaskSet frozen = frozen_set(model.registry.masks());

  Optimizer<float> optimizer(config.optim);
  TrainSession<float> session{net, s.entry.head, s.entry.norm, optimizer, frozen, config.batch_size, true};
  const TaskMaskSet full = TaskMaskSet::full(net);
  session.run(task.train.x, s.labels, config.epochs, full, s.rng);

  const Tensor<float> sample =
      selection_sample(task.train, config.selection_sample, derive_seed(config.seed, {static_cast<std::uint64_t>(id), kSample}));
  s.entry.mask = iterative_prune(session, task.train.x, s.labels, sample, config.prune, full, s.rng);
  s.entry.newly_frozen = claim_and_freeze(net, s.entry.mask, id, model.registry.ids());
  s.entry.selection_scores = selection_scores(net, s.entry, sample);
  model.registry.add(std::move(s.entry));

  if (config.reinit == ReinitMode::reinit) {
    reinit_unclaimed(net, derive_seed(config.seed, {static_cast<std::uint64_t>(id), kReinit}));
  }
  return id;
}

TaskId learn_task_frozen_variant(ContinualModel& model, const TaskSplit& task, const LearnConfig& config) {
  TaskSetup s = begin_task(model, task, config);
  Network<float>& net = model.network;
  const TaskId id = s.entry.id;
  const TaskMaskSet frozen = frozen_set(model.registry.masks());
  const TaskMaskSet full = TaskMaskSet::full(net);

  Optimizer<float> optimizer(config.optim);
  TrainSession<float> session{net, s.entry.head, s.entry.norm, optimizer, frozen, config.batch_size,
                              model.registry.empty()};
  session.run(task.train.x, s.labels, config.epochs, full, s.rng);

  const Tensor<float> sample =
      selection_sample(task.train, config.selection_sample, derive_seed(config.seed, {static_cast<std::uint64_t>(id), kSample}));
  s.entry.mask = full;
  s.entry.newly_frozen = claim_and_freeze(net, s.entry.mask, id, model.registry.ids());
  s.entry.selection_scores = selection_scores(net, s.entry, sample);
  model.registry.add(std::move(s.entry));
  return id;
}

TaskId learn(ContinualModel& model, const TaskSplit& task, const LearnConfig& config) {
  return config.variant == Variant::frozen ? learn_task_frozen_variant(model, task, config)
                                           : learn_task(model, task, config);
}

SubnetworkOutput run_subnetwork(const Network<float>& net, const TaskEntry& entry, const Tensor<float>& x) {
  const Index n = x.batch();
  SubnetworkOutput out;
  out.features.resize(n, net.feature_dim());
  out.logits.resize(n, entry.head.classes());
  for (Index start = 0; start < n; start += kEvalChunk) {
    const Index count = std::min(kEvalChunk, n - start);
    const Tensor<float> f = forward(net, x.rows(start, count), &entry.mask, entry.norm);
    out.features.middleRows(start, count) = f.matrix();
    out.logits.middleRows(start, count) = head_forward(entry.head, f);
  }
  return out;
}

SubnetworkOutput run_subnetwork(const ContinualModel& model, TaskId task, const Tensor<float>& x) {
  return run_subnetwork(model.network, model.registry.at(task), x);
}

Matrix<float> infer_subnetwork(const ContinualModel& model, TaskId task, const Tensor<float>& batch) {
  return run_subnetwork(model, task, batch).logits;
}

std::vector<int> predict_classes(const TaskEntry& entry, const Matrix<float>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    Index best = 0;
    logits.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = entry.classes[static_cast<std::size_t>(best)];
  }
  return out;
}

double task_il_accuracy(const ContinualModel& model, TaskId task, const LabeledSet& set) {
  if (set.size() == 0) return 0.0;
  const auto pred = predict_classes(model.registry.at(task), infer_subnetwork(model, task, set.x));
  Index correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == set.labels[i];
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

}  // namespace cps
