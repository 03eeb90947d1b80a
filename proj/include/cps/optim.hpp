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

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cps/error.hpp"
#include "cps/mask.hpp"
#include "cps/tensor.hpp"

namespace cps {

enum class OptimizerKind { sgd, adam };

/// Learning rate is divided by `divisor` from `epoch` on (0-based epochs).
struct LrStep {
  int epoch = 0;
  double divisor = 10.0;
};

struct OptimSpec {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 0.01;
  double weight_decay = 1e-4;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<LrStep> schedule;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
    for (std::size_t i = 0; i < schedule.size(); ++i) {
      if (!(schedule[i].divisor > 1.0)) throw ConfigError("schedule divisors must exceed 1");
      if (i > 0 && schedule[i].epoch <= schedule[i - 1].epoch) throw ConfigError("schedule epochs must increase");
    }
  }

  double lr_at(int epoch) const {
    double divisor = 1.0;
    for (const auto& s : schedule) {
      if (epoch >= s.epoch) divisor *= s.divisor;
    }
    return lr / divisor;
  }
};

/// A contiguous block of trainable values. Entries whose bit is set in
/// `frozen` are never written, and neither is their optimizer state.
template <typename Scalar>
struct ParamSlot {
  std::span<Scalar> values;
  std::span<Scalar> grads;
  const Bitset* frozen = nullptr;
};

/// SGD with momentum or Adam, both with L2 weight decay folded into the
/// gradient. State is kept per slot position, so callers must pass the same
/// slot layout on every step; construct a new optimizer to reset moments.
template <typename Scalar>
class Optimizer {
 public:
  explicit Optimizer(OptimSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const OptimSpec& spec() const noexcept { return spec_; }
  long steps() const noexcept { return steps_; }

  void step(std::span<ParamSlot<Scalar>> slots, int epoch) {
    if (first_.empty()) {
      for (const auto& s : slots) {
        const auto n = static_cast<Index>(s.values.size());
        first_.push_back(Vector<Scalar>::Zero(n));
        second_.push_back(spec_.kind == OptimizerKind::adam ? Vector<Scalar>::Zero(n) : Vector<Scalar>());
      }
    } else if (first_.size() != slots.size()) {
      throw StructuralError("optimizer slot layout changed between steps");
    }

    for (auto& s : slots) {
      if (s.frozen) {
        if (s.frozen->size() != s.grads.size()) throw StructuralError("frozen bitset does not match slot size");
        for (auto p = s.frozen->find_first(); p != Bitset::npos; p = s.frozen->find_next(p)) s.grads[p] = Scalar(0);
      }
      for (std::size_t i = 0; i < s.grads.size(); ++i) {
        if (!std::isfinite(static_cast<double>(s.grads[i]))) throw NumericError("non-finite gradient");
      }
    }

    ++steps_;
    const auto lr = static_cast<Scalar>(spec_.lr_at(epoch));
    const auto wd = static_cast<Scalar>(spec_.weight_decay);
    const auto b1 = static_cast<Scalar>(spec_.beta1);
    const auto b2 = static_cast<Scalar>(spec_.beta2);
    const auto eps = static_cast<Scalar>(spec_.epsilon);
    const auto correction1 = static_cast<Scalar>(1.0 - std::pow(spec_.beta1, static_cast<double>(steps_)));
    const auto correction2 = static_cast<Scalar>(1.0 - std::pow(spec_.beta2, static_cast<double>(steps_)));
    const auto mom = static_cast<Scalar>(spec_.momentum);

    for (std::size_t k = 0; k < slots.size(); ++k) {
      auto& s = slots[k];
      if (static_cast<Index>(s.values.size()) != first_[k].size()) throw StructuralError("optimizer slot resized");
      for (std::size_t i = 0; i < s.values.size(); ++i) {
        if (s.frozen && s.frozen->test(i)) continue;
        const auto j = static_cast<Index>(i);
        const Scalar g = s.grads[i] + wd * s.values[i];
        if (spec_.kind == OptimizerKind::sgd) {
          Scalar& v = first_[k][j];
          v = mom * v + g;
          s.values[i] -= lr * v;
        } else {
          Scalar& m = first_[k][j];
          Scalar& v = second_[k][j];
          m = b1 * m + (Scalar(1) - b1) * g;
          v = b2 * v + (Scalar(1) - b2) * g * g;
          const Scalar m_hat = m / correction1;
          const Scalar v_hat = v / correction2;
          s.values[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
      }
    }
  }

  /// Moment buffers, for inspection in tests.
  const std::vector<Vector<Scalar>>& first_moments() const noexcept { return first_; }
  const std::vector<Vector<Scalar>>& second_moments() const noexcept { return second_; }

 private:
  OptimSpec spec_;
  long steps_ = 0;
  std::vector<Vector<Scalar>> first_, second_;
};

}  // namespace cps
