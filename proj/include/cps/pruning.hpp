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

#include <span>
#include <string>
#include <vector>

#include "cps/error.hpp"
#include "cps/forward.hpp"
#include "cps/importance.hpp"
#include "cps/mask.hpp"
#include "cps/network.hpp"
#include "cps/optim.hpp"
#include "cps/rng.hpp"

namespace cps {

struct PruneConfig {
  double alpha_fc = 0.95;
  double alpha_conv = 0.9;
  int iterations = 3;
  int retrain_epochs = 1;

  void validate() const {
    if (!(alpha_fc > 0.0 && alpha_fc <= 1.0)) throw ConfigError("alpha_fc must lie in (0, 1]");
    if (!(alpha_conv > 0.0 && alpha_conv <= 1.0)) throw ConfigError("alpha_conv must lie in (0, 1]");
    if (iterations < 0) throw ConfigError("pruning iterations must be non-negative");
    if (retrain_epochs < 1) throw ConfigError("retrain epochs must be positive");
  }
};

/// Mini-batch training of one task's subnetwork. Backbone scalars that are
/// frozen or outside the active mask are never updated; the task's norm
/// parameters and head always are.
template <typename Scalar>
struct TrainSession {
  Network<Scalar>& net;
  Head<Scalar>& head;
  NormState<Scalar>& norm;
  Optimizer<Scalar>& optimizer;
  const TaskMaskSet& frozen;  // empty set = nothing frozen
  Index batch_size = 32;
  bool train_backbone = true;

  /// Returns the mean loss of the final epoch.
  double run(const Tensor<Scalar>& x, std::span<const int> labels, int epochs, const TaskMaskSet& mask, Rng& rng) {
    if (x.batch() != static_cast<Index>(labels.size())) throw InputError("sample and label counts differ");
    if (!mask.fits(net)) throw StructuralError("active mask layout does not match the network");

    // Locked = frozen | ~mask; everything when the backbone is not trained.
    TaskMaskSet locked = ~mask;
    if (!frozen.params.empty()) locked |= frozen;
    if (!train_backbone) {
      for (auto& b : locked.params) b.set();
    }

    std::vector<ParamSlot<Scalar>> slots;
    for (std::size_t i = 0; i < net.params.size(); ++i) {
      auto& p = net.params[i];
      slots.push_back({std::span<Scalar>(p.values.data(), p.values.size()),
                       std::span<Scalar>(p.grads.data(), p.grads.size()), &locked.params[i]});
    }
    for (auto& l : norm.layers) {
      slots.push_back({std::span<Scalar>(l.gamma.data(), l.gamma.size()),
                       std::span<Scalar>(l.gamma_grad.data(), l.gamma_grad.size()), nullptr});
      slots.push_back({std::span<Scalar>(l.beta.data(), l.beta.size()),
                       std::span<Scalar>(l.beta_grad.data(), l.beta_grad.size()), nullptr});
    }
    slots.push_back({std::span<Scalar>(head.weight.data(), head.weight.size()),
                     std::span<Scalar>(head.weight_grad.data(), head.weight_grad.size()), nullptr});
    slots.push_back({std::span<Scalar>(head.bias.data(), head.bias.size()),
                     std::span<Scalar>(head.bias_grad.data(), head.bias_grad.size()), nullptr});

    const Index n = x.batch();
    double last = 0.0;
    std::vector<int> batch_labels;
    for (int epoch = 0; epoch < epochs; ++epoch) {
      const auto order = rng.permutation<Index>(static_cast<std::size_t>(n));
      double sum = 0.0;
      Index batches = 0;
      for (Index start = 0; start < n; start += batch_size) {
        const Index count = std::min(batch_size, n - start);
        if (count < 2) break;  // batch statistics need two samples
        const std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(count));
        batch_labels.clear();
        for (Index i : idx) batch_labels.push_back(labels[static_cast<std::size_t>(i)]);
        sum += compute_gradients(net, head, norm, &mask, x.gather(idx), batch_labels);
        optimizer.step(slots, epoch);
        ++batches;
      }
      last = batches ? sum / static_cast<double>(batches) : 0.0;
    }
    return last;
  }
};

/// One pruning pass: scores every backbone connection on `sample` under
/// `current` and keeps, per receiving neuron, the minimal top-score set
/// reaching alpha. Throws SaturationError if a layer loses every weight.
template <typename Scalar>
TaskMaskSet prune_step(const Network<Scalar>& net, const NormState<Scalar>& norm, const TaskMaskSet& current,
                       const Tensor<Scalar>& sample, const PruneConfig& config) {
  Trace<Scalar> trace;
  forward(net, sample, &current, norm, &trace);
  TaskMaskSet next = current;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    if (!l.prunable()) continue;
    const ImportanceMatrix im = layer_importance(net, i, current, trace);
    const double alpha = l.kind == LayerKind::conv2d ? config.alpha_conv : config.alpha_fc;
    const Index taps = l.kind == LayerKind::conv2d ? l.kernel * l.kernel : 1;
    Bitset& wbits = next.params[static_cast<std::size_t>(l.weight)];
    Bitset& bbits = next.params[static_cast<std::size_t>(l.bias)];
    std::vector<double> row(static_cast<std::size_t>(im.scores.cols()));
    for (Index j = 0; j < im.rows(); ++j) {
      Eigen::Map<Eigen::RowVectorXd>(row.data(), im.scores.cols()) = im.scores.row(j);
      const std::vector<bool> keep = prune_neuron(row, alpha);
      for (Index in = 0; in < im.inputs(); ++in) {
        if (keep[static_cast<std::size_t>(in)]) continue;
        const auto base = static_cast<std::size_t>((j * l.in + in) * taps);
        for (Index t = 0; t < taps; ++t) wbits.reset(base + static_cast<std::size_t>(t));
      }
      if (!keep.back()) bbits.reset(static_cast<std::size_t>(j));
    }
    if (wbits.none()) {
      throw SaturationError(static_cast<int>(i), "pruning removed every connection of layer " + std::to_string(i));
    }
  }
  return next;
}

/// Alternates pruning and retraining `config.iterations` times starting from
/// `mask`, and returns the surviving connections. Frozen values are never
/// modified; they may still be dropped from the returned mask.
template <typename Scalar>
TaskMaskSet iterative_prune(TrainSession<Scalar>& session, const Tensor<Scalar>& x, std::span<const int> labels,
                            const Tensor<Scalar>& sample, const PruneConfig& config, TaskMaskSet mask, Rng& rng) {
  config.validate();
  for (int it = 0; it < config.iterations; ++it) {
    mask = prune_step(session.net, session.norm, mask, sample, config);
    session.run(x, labels, config.retrain_epochs, mask, rng);
  }
  return mask;
}

}  // namespace cps
