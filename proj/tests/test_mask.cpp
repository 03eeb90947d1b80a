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

#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "cps/error.hpp"
#include "cps/mask.hpp"
#include "cps/optim.hpp"
#include "cps/pruning.hpp"
#include "support.hpp"

using namespace cps;

namespace {

TaskMaskSet bits(const char* pattern) {
  TaskMaskSet m;
  m.params.emplace_back(std::string(pattern).size());
  for (std::size_t i = 0; pattern[i] != '\0'; ++i) m.params[0][i] = pattern[i] == '1';
  return m;
}

Network<float> layer(Index in, Index out, std::uint64_t seed = 1) {
  NetworkBuilder<float> b(Shape{in});
  b.linear(out);
  Rng rng(seed);
  return b.build(rng);
}

}  // namespace

TEST_CASE("frozen_set is the union of earlier masks") {
  CHECK(frozen_set({}).params.empty());
  const std::vector<TaskMaskSet> disjoint{bits("101"), bits("010")};
  CHECK(frozen_set(disjoint) == bits("111"));
  const std::vector<TaskMaskSet> overlap{bits("110"), bits("011")};
  const auto u = frozen_set(overlap);
  CHECK(u == bits("111"));
  CHECK(u.count() == 3);
  const std::vector<TaskMaskSet> bad{bits("10"), bits("011")};
  CHECK_THROWS_AS(frozen_set(bad), StructuralError);

  Rng rng(3);
  std::vector<TaskMaskSet> masks;
  TaskMaskSet previous;
  for (int t = 0; t < 6; ++t) {
    TaskMaskSet m;
    m.params.emplace_back(200);
    for (std::size_t i = 0; i < 200; ++i) m.params[0][i] = rng.uniform() < 0.2;
    masks.push_back(m);
    const auto now = frozen_set(masks);
    if (t > 0) CHECK(previous.is_subset_of(now));
    previous = now;
  }
}

TEST_CASE("mask_gradients zeroes exactly the frozen entries") {
  auto net = layer(3, 2);
  auto& w = net.params[0];
  for (Index i = 0; i < w.size(); ++i) w.grads[i] = static_cast<float>(i + 1);
  const Vector<float> before = w.grads;
  Bitset none(6);
  mask_gradients(w, none);
  CHECK(w.grads == before);
  Bitset some(6);
  some.set(1).set(4);
  mask_gradients(w, some);
  for (Index i = 0; i < 6; ++i) CHECK(w.grads[i] == ((i == 1 || i == 4) ? 0.f : before[i]));
  Bitset all(6);
  all.set();
  mask_gradients(w, all);
  CHECK(w.grads.isZero(0));
  CHECK_THROWS_AS(mask_gradients(w, Bitset(5)), StructuralError);
}

TEST_CASE("a frozen entry survives an sgd step while its neighbour moves") {
  auto net = layer(1, 2);
  auto& w = net.params[0];
  w.values << 1.f, 1.f;
  w.grads << 0.5f, 0.5f;
  Bitset frozen(2);
  frozen.set(0);
  mask_gradients(w, frozen);
  OptimSpec spec;
  spec.kind = OptimizerKind::sgd;
  spec.lr = 0.1;
  spec.weight_decay = 0;
  spec.momentum = 0;
  Optimizer<float> opt(spec);
  std::vector<ParamSlot<float>> slots{{std::span<float>(w.values.data(), 2), std::span<float>(w.grads.data(), 2), &frozen}};
  opt.step(slots, 0);
  const Vector<float>& values = w.values;
  CHECK(values[0] == 1.f);
  CHECK(values[1] == doctest::Approx(0.95f));
}

TEST_CASE("claim_and_freeze records first owners only") {
  auto net = layer(10, 10);  // 100 weights + 10 biases
  TaskMaskSet first = TaskMaskSet::empty(net);
  for (std::size_t i = 0; i < 40; ++i) first.params[0].set(i);
  const std::vector<TaskId> none;
  CHECK(claim_and_freeze(net, first, 1, none) == 40);
  const std::vector<TaskId> one{1};
  CHECK_THROWS_AS(claim_and_freeze(net, first, 1, one), StateError);
  CHECK(claim_and_freeze(net, first, 2, one) == 0);

  TaskMaskSet half = TaskMaskSet::empty(net);
  for (std::size_t i = 20; i < 60; ++i) half.params[0].set(i);
  half.params[1].set(3);
  const std::vector<TaskId> two{1, 2};
  CHECK(claim_and_freeze(net, half, 3, two) == (half & ~first).count());
  for (std::size_t i = 0; i < 100; ++i) {
    const TaskId expect = i < 40 ? 1 : (i < 60 ? 3 : kFree);
    CHECK(net.params[0].owner[i] == expect);
  }
  CHECK(net.params[1].owner[3] == 3);
  CHECK(TaskMaskSet::owned(net) == (first | half));
}

TEST_CASE("reinit_unclaimed redraws free values only") {
  SUBCASE("nothing free, nothing changes") {
    auto net = layer(4, 3);
    const std::vector<TaskId> none;
    claim_and_freeze(net, TaskMaskSet::full(net), 1, none);
    const auto before = net.params;
    reinit_unclaimed(net, 99);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(net.params[i].values == before[i].values);
  }
  SUBCASE("mixed ownership keeps frozen coordinates bitwise") {
    auto net = layer(8, 8);
    Rng rng(5);
    TaskMaskSet m = TaskMaskSet::empty(net);
    for (auto& b : m.params) {
      for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.uniform() < 0.5;
    }
    for (auto& p : net.params) {
      for (Index i = 0; i < p.size(); ++i) p.values[i] = static_cast<float>(rng.normal());
    }
    const std::vector<TaskId> none;
    claim_and_freeze(net, m, 1, none);
    const auto before = net.params;
    reinit_unclaimed(net, 7);
    std::size_t moved = 0;
    for (std::size_t p = 0; p < before.size(); ++p) {
      for (Index i = 0; i < before[p].size(); ++i) {
        if (net.params[p].frozen(i)) {
          CHECK(net.params[p].values[i] == before[p].values[i]);
        } else {
          moved += net.params[p].values[i] != before[p].values[i];
        }
      }
    }
    CHECK(moved > 0);
  }
  SUBCASE("all free: weights follow the initializer (Kolmogorov-Smirnov)") {
    auto net = layer(100, 100);
    reinit_unclaimed(net, 2024);
    const auto& w = net.params[0];
    const double bound = std::sqrt(6.0 / 100.0);
    std::vector<double> v(w.values.data(), w.values.data() + w.size());
    std::sort(v.begin(), v.end());
    const double n = static_cast<double>(v.size());
    double d = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double cdf = (v[i] + bound) / (2.0 * bound);
      d = std::max({d, std::abs(cdf - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - cdf)});
    }
    // asymptotic critical value at p = 0.01
    CHECK(d < 1.628 / std::sqrt(n));
    CHECK(net.params[1].values.isZero(0));
  }
}

TEST_CASE("frozen values never change across several trained tasks") {
  auto net = test::mlp<float>(6, {12, 10}, true, 4);
  Rng rng(6);
  const auto x = test::random_tensor<float>(Shape{64, 6}, rng);
  const auto labels = test::iota_labels(64, 3);
  std::vector<TaskMaskSet> masks;
  std::vector<TaskId> ids;
  std::vector<Network<float>> snapshots;
  for (TaskId t = 1; t <= 4; ++t) {
    const TaskMaskSet frozen = frozen_set(masks);
    auto head = Head<float>::init(3, net.feature_dim(), rng);
    auto norm = NormState<float>::fresh(net);
    OptimSpec spec;
    spec.lr = 0.05;
    Optimizer<float> opt(spec);
    TrainSession<float> session{net, head, norm, opt, frozen, 16, true};
    session.run(x, labels, 3, TaskMaskSet::full(net), rng);
    TaskMaskSet m = TaskMaskSet::empty(net);
    for (auto& b : m.params) {
      for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.uniform() < 0.3;
    }
    claim_and_freeze(net, m, t, ids);
    ids.push_back(t);
    masks.push_back(m);
    reinit_unclaimed(net, static_cast<std::uint64_t>(t));
    for (const auto& snap : snapshots) {
      for (std::size_t p = 0; p < net.params.size(); ++p) {
        for (Index i = 0; i < net.params[p].size(); ++i) {
          if (snap.params[p].frozen(i)) CHECK(net.params[p].values[i] == snap.params[p].values[i]);
        }
      }
    }
    snapshots.push_back(net);
  }
}
