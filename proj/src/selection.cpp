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

#include "cps/selection.hpp"

#include <algorithm>
#include <cmath>

#include "cps/error.hpp"
#include "cps/importance.hpp"
#include "cps/rng.hpp"

namespace cps {
namespace {

void require_tasks(const ContinualModel& model) {
  if (model.registry.empty()) throw StateError("no task has been registered");
}

Matrix<float> gather_rows(const Matrix<float>& m, std::span<const Index> rows) {
  Matrix<float> out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

double summed_max_logit(const Matrix<float>& logits) {
  double sum = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) sum += static_cast<double>(logits.row(i).maxCoeff());
  return sum;
}

double score_distance(const TaskEntry& entry, const Matrix<float>& features) {
  if (entry.selection_scores.size() == 0) {
    throw StateError("task " + std::to_string(entry.id) + " has no stored selection scores");
  }
  const Eigen::MatrixXd estimate = signed_contribution_scores(entry.head.weight, features);
  if (estimate.rows() != entry.selection_scores.rows() || estimate.cols() != entry.selection_scores.cols()) {
    throw StructuralError("stored selection scores of task " + std::to_string(entry.id) + " have the wrong shape");
  }
  return (entry.selection_scores - estimate).norm();
}

}  // namespace

std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::maxoutput: return "maxoutput";
    case SelectionStrategy::importance_scores: return "is";
    case SelectionStrategy::oracle: return "oracle";
  }
  return "?";
}

SelectionStrategy selection_strategy_from_string(const std::string& name) {
  if (name == "maxoutput") return SelectionStrategy::maxoutput;
  if (name == "is") return SelectionStrategy::importance_scores;
  if (name == "oracle") return SelectionStrategy::oracle;
  throw ConfigError("unknown selection strategy '" + name + "' (expected maxoutput, is or oracle)");
}

CachedOutputs cache_outputs(const ContinualModel& model, const Tensor<float>& x) {
  CachedOutputs cache;
  for (const auto& e : model.registry.entries()) cache.per_task.push_back(run_subnetwork(model.network, e, x));
  return cache;
}

SelectionReport select_cached(const ContinualModel& model, const CachedOutputs& cache, std::span<const Index> rows,
                              SelectionStrategy strategy, TaskId truth) {
  require_tasks(model);
  if (rows.empty()) throw InputError("selection batch is empty");
  if (cache.per_task.size() != model.registry.size()) throw StateError("cached outputs do not cover every task");
  const auto& entries = model.registry.entries();

  SelectionReport report;
  std::size_t best = 0;
  switch (strategy) {
    case SelectionStrategy::maxoutput:
      for (std::size_t t = 0; t < entries.size(); ++t) {
        report.statistic.push_back(summed_max_logit(gather_rows(cache.per_task[t].logits, rows)));
        if (report.statistic[t] > report.statistic[best]) best = t;
      }
      break;
    case SelectionStrategy::importance_scores:
      for (std::size_t t = 0; t < entries.size(); ++t) {
        report.statistic.push_back(score_distance(entries[t], gather_rows(cache.per_task[t].features, rows)));
        if (report.statistic[t] < report.statistic[best]) best = t;
      }
      break;
    case SelectionStrategy::oracle:
      if (!model.registry.contains(truth)) throw InputError("oracle selection needs a registered true task");
      report.statistic.assign(entries.size(), 0.0);
      best = static_cast<std::size_t>(truth - 1);
      report.statistic[best] = 1.0;
      break;
  }
  report.task = entries[best].id;
  report.labels = predict_classes(entries[best], gather_rows(cache.per_task[best].logits, rows));
  return report;
}

SelectionReport select(const ContinualModel& model, const Tensor<float>& batch, SelectionStrategy strategy,
                       TaskId truth) {
  require_tasks(model);
  const CachedOutputs cache = cache_outputs(model, batch);
  std::vector<Index> rows(static_cast<std::size_t>(batch.batch()));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<Index>(i);
  return select_cached(model, cache, rows, strategy, truth);
}

SelectionReport select_maxoutput(const ContinualModel& model, const Tensor<float>& batch) {
  return select(model, batch, SelectionStrategy::maxoutput);
}

SelectionReport select_importance_scores(const ContinualModel& model, const Tensor<float>& batch) {
  return select(model, batch, SelectionStrategy::importance_scores);
}

Eigen::MatrixXd test_importance_scores(const ContinualModel& model, TaskId task, const Tensor<float>& batch) {
  const TaskEntry& entry = model.registry.at(task);
  return signed_contribution_scores(entry.head.weight, run_subnetwork(model.network, entry, batch).features);
}

StreamResult classify_stream(const ContinualModel& model, std::span<const TaskSplit> tasks, Index batch_size,
                             SelectionStrategy strategy, std::uint64_t seed) {
  require_tasks(model);
  if (batch_size < 1) throw InputError("batch size must be at least 1");
  const Index registered = static_cast<Index>(model.registry.size());
  StreamResult result;
  result.confusion = Eigen::MatrixXi::Zero(static_cast<Index>(tasks.size()), registered);

  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const TaskSplit& split = tasks[k];
    const TaskId truth = static_cast<TaskId>(k + 1);
    if (!model.registry.contains(truth) || model.registry.at(truth).classes != split.classes) {
      throw InputError("stream task " + std::to_string(truth) + " does not match the registry");
    }
    const Index n = split.test.size();
    if (n == 0) throw InputError("task " + std::to_string(truth) + " has an empty test set");
    const CachedOutputs cache = cache_outputs(model, split.test.x);
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(truth)}));
    const auto order = rng.permutation<Index>(static_cast<std::size_t>(n));

    Index correct = 0, right_task = 0, batches = 0;
    for (Index start = 0; start < n; start += batch_size) {
      const Index count = std::min(batch_size, n - start);
      const std::span<const Index> rows(order.data() + start, static_cast<std::size_t>(count));
      const SelectionReport r = select_cached(model, cache, rows, strategy, truth);
      ++batches;
      ++result.confusion(static_cast<Index>(k), r.task - 1);
      if (r.task == truth) ++right_task;
      for (std::size_t i = 0; i < rows.size(); ++i) correct += r.labels[i] == split.test.labels[static_cast<std::size_t>(rows[i])];
    }
    result.class_il_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
    result.selection_accuracy.push_back(static_cast<double>(right_task) / static_cast<double>(batches));
    result.batches += static_cast<std::size_t>(batches);
  }
  return result;
}

}  // namespace cps
