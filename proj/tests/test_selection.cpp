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

#include <cmath>

#include "cps/error.hpp"
#include "cps/importance.hpp"
#include "cps/selection.hpp"
#include "support.hpp"

using namespace cps;

namespace {

// linear(identity) -> relu, so features are relu(x)
ContinualModel identity_model(Index dim) {
  NetworkBuilder<float> b(Shape{dim});
  b.linear(dim).relu();
  Rng rng(1);
  ContinualModel m{b.build(rng), {}};
  auto& w = m.network.params[0];
  auto& bias = m.network.params[1];
  w.values.setZero();
  for (Index i = 0; i < dim; ++i) w.values[i * dim + i] = 1.0f;
  bias.values.setZero();
  return m;
}

void add_task(ContinualModel& m, Matrix<float> w, Vector<float> bias, std::vector<int> classes,
              Eigen::MatrixXd scores = {}) {
  TaskEntry e;
  e.id = m.registry.next_id();
  e.classes = std::move(classes);
  e.mask = TaskMaskSet::full(m.network);
  e.head.weight = std::move(w);
  e.head.bias = std::move(bias);
  e.norm = NormState<float>::fresh(m.network);
  e.selection_scores = scores.size() ? scores : Eigen::MatrixXd::Zero(e.head.weight.rows(), e.head.weight.cols());
  m.registry.add(std::move(e));
}

Tensor<float> rows(std::initializer_list<std::initializer_list<float>> data) {
  const Index n = static_cast<Index>(data.size());
  const Index d = static_cast<Index>(data.begin()->size());
  Tensor<float> t(Shape{n, d});
  Index i = 0;
  for (const auto& r : data) {
    for (float v : r) t[i++] = v;
  }
  return t;
}

Matrix<float> mat(Index r, Index c, std::initializer_list<float> v) {
  Matrix<float> m(r, c);
  Index i = 0;
  for (float x : v) m.data()[i++] = x;  // storage order of Matrix<float> is row-major
  return m;
}

}  // namespace

TEST_CASE("maxoutput picks the head with the larger summed max logit") {
  ContinualModel m = identity_model(2);
  add_task(m, mat(2, 2, {1, 0, 0, 1}), Vector<float>::Zero(2), {0, 1});
  Vector<float> b2(2);
  b2 << 0.0f, 1.0f;
  add_task(m, mat(2, 2, {0.5f, 0, 0, 0}), b2, {2, 3});
  const auto batch = rows({{1, 0}, {4, 0}});
  const auto r = select_maxoutput(m, batch);
  CHECK(r.statistic == std::vector<double>{5.0, 3.0});
  CHECK(r.task == 1);
  CHECK(r.labels == std::vector<int>{0, 0});
}

TEST_CASE("maxoutput with one task and with ties") {
  ContinualModel m = identity_model(2);
  add_task(m, mat(1, 2, {-3, -3}), Vector<float>::Zero(1), {7});
  CHECK(select_maxoutput(m, rows({{1, 1}})).task == 1);
  add_task(m, mat(1, 2, {-3, -3}), Vector<float>::Zero(1), {8});
  add_task(m, mat(1, 2, {-3, -3}), Vector<float>::Zero(1), {9});
  const auto r = select_maxoutput(m, rows({{1, 1}}));
  CHECK(r.task == 1);
  CHECK(r.labels == std::vector<int>{7});
}

TEST_CASE("test-time importance scores") {
  SUBCASE("single connection") {
    ContinualModel m = identity_model(1);
    add_task(m, mat(1, 1, {2}), Vector<float>::Zero(1), {0});
    CHECK(test_importance_scores(m, 1, rows({{3}, {3}, {3}}))(0, 0) == 6.0);
  }
  SUBCASE("batch of one is elementwise") {
    ContinualModel m = identity_model(3);
    add_task(m, mat(2, 3, {1, -2, 3, 0.5f, 4, -1}), Vector<float>::Zero(2), {0, 1});
    const auto s = test_importance_scores(m, 1, rows({{2, 1, 0.5f}}));
    Eigen::MatrixXd expect(2, 3);
    expect << 2, -2, 1.5, 1, 4, -0.5;
    CHECK(s.isApprox(expect));
  }
  SUBCASE("inactive connection is exactly zero") {
    Matrix<double> w(1, 2);
    w << 2, 5;
    Matrix<double> f(2, 2);
    f << 1, 1, 3, 3;
    Bitset active(2);
    active.set(0);
    const auto s = signed_contribution_scores(w, f, &active);
    CHECK(s(0, 0) == 4.0);
    CHECK(s(0, 1) == 0.0);
  }
}

TEST_CASE("importance-score selection picks the nearest stored scores") {
  ContinualModel m = identity_model(2);
  Eigen::MatrixXd s1(1, 2), s2(1, 2);
  s1 << 1, 0;
  s2 << 0, 1;
  add_task(m, mat(1, 2, {1, 0}), Vector<float>::Zero(1), {0}, s1);
  add_task(m, mat(1, 2, {0.5f, 0.5f}), Vector<float>::Zero(1), {1}, s2);
  const auto r = select_importance_scores(m, rows({{1, 1}}));
  REQUIRE(r.statistic.size() == 2);
  CHECK(r.statistic[0] == 0.0);
  CHECK(r.statistic[1] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
  CHECK(r.task == 1);

  SUBCASE("equal distances go to the lowest id") {
    ContinualModel t = identity_model(2);
    add_task(t, mat(1, 2, {1, 0}), Vector<float>::Zero(1), {0}, s2);
    add_task(t, mat(1, 2, {1, 0}), Vector<float>::Zero(1), {1}, s2);
    CHECK(select_importance_scores(t, rows({{1, 1}})).task == 1);
  }
}

TEST_CASE("selection errors") {
  ContinualModel m = identity_model(2);
  CHECK_THROWS_AS(select_maxoutput(m, rows({{1, 1}})), StateError);
  CHECK_THROWS_AS(select_importance_scores(m, rows({{1, 1}})), StateError);
  add_task(m, mat(1, 2, {1, 0}), Vector<float>::Zero(1), {0});
  // drop the stored scores of a registered task
  ContinualModel stripped = identity_model(2);
  TaskEntry e = m.registry.at(1);
  e.selection_scores.resize(0, 0);
  stripped.registry.add(e);
  CHECK_THROWS_AS(select_importance_scores(stripped, rows({{1, 1}})), StateError);
  CHECK_THROWS_AS(select(m, rows({{1, 1}}), SelectionStrategy::oracle), InputError);
  CHECK(selection_strategy_from_string("is") == SelectionStrategy::importance_scores);
  CHECK_THROWS_AS(selection_strategy_from_string("vote"), ConfigError);
}

TEST_CASE("maxoutput is invariant to a common positive logit scale") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    ContinualModel a = identity_model(4), b = identity_model(4);
    for (int t = 0; t < 4; ++t) {
      Matrix<float> w = Matrix<float>::NullaryExpr(3, 4, [&] { return static_cast<float>(rng.normal()); });
      Vector<float> bias = Vector<float>::NullaryExpr(3, [&] { return static_cast<float>(rng.normal()); });
      add_task(a, w, bias, {3 * t, 3 * t + 1, 3 * t + 2});
      add_task(b, 4.0f * w, 4.0f * bias, {3 * t, 3 * t + 1, 3 * t + 2});  // power of two keeps float products exact
    }
    const auto batch = test::random_tensor<float>(Shape{5, 4}, rng);
    CHECK(select_maxoutput(a, batch).task == select_maxoutput(b, batch).task);
  }
}

TEST_CASE("stream classification on trained subnetworks") {
  const auto stream = synthetic_blobs(3, 2, 16, 10.0, 21);
  ContinualModel model{test::mlp<float>(16, {32, 32}, false, 2), {}};
  for (const auto& t : stream.tasks) learn_task(model, t, test::quick_learn());

  std::vector<Vector<float>> before;
  for (const auto& p : model.network.params) before.push_back(p.values);

  const auto oracle = classify_stream(model, stream.tasks, 20, SelectionStrategy::oracle, 5);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(oracle.selection_accuracy[k] == 1.0);
    CHECK(oracle.class_il_accuracy[k] == task_il_accuracy(model, static_cast<TaskId>(k + 1), stream.tasks[k].test));
  }
  CHECK(oracle.confusion.diagonal().sum() == static_cast<int>(oracle.batches));

  const auto is = classify_stream(model, stream.tasks, 20, SelectionStrategy::importance_scores, 5);
  CHECK(is.confusion.sum() == static_cast<int>(is.batches));
  CHECK(is.batches == 3 * 5);  // 100 test samples per task, s = 20
  const auto again = classify_stream(model, stream.tasks, 20, SelectionStrategy::importance_scores, 5);
  CHECK(again.selection_accuracy == is.selection_accuracy);

  // selection never touches the model
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(model.network.params[i].values == before[i]);

  // the exact training subsample identifies its own task
  for (TaskId t = 1; t <= 3; ++t) {
    const auto& entry = model.registry.at(t);
    const auto sample = selection_sample(stream.tasks[static_cast<std::size_t>(t - 1)].train, 1000,
                                         derive_seed(test::quick_learn().seed, {static_cast<std::uint64_t>(t), 3})  /* sample tag */);
    CHECK(test_importance_scores(model, t, sample).isApprox(entry.selection_scores, 1e-9));
    CHECK(select_importance_scores(model, sample).task == t);
  }
}
