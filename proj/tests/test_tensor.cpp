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
#include <limits>

#include "cps/error.hpp"
#include "cps/forward.hpp"
#include "cps/mask.hpp"
#include "support.hpp"

using namespace cps;

namespace {

Network<float> single_linear(Index in, Index out) {
  NetworkBuilder<float> b(Shape{in});
  b.linear(out);
  Rng rng(1);
  return b.build(rng);
}

// Direct convolution, one output at a time.
Tensor<double> naive_conv(const Tensor<double>& x, const Vector<double>& w, const Vector<double>& bias, Index cout,
                          Index k, Index stride, Index pad) {
  const Index n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const Index ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> y(Shape{n, cout, ho, wo});
  for (Index s = 0; s < n; ++s)
    for (Index o = 0; o < cout; ++o)
      for (Index i = 0; i < ho; ++i)
        for (Index j = 0; j < wo; ++j) {
          double acc = bias[o];
          for (Index c = 0; c < cin; ++c)
            for (Index a = 0; a < k; ++a)
              for (Index b = 0; b < k; ++b) {
                const Index r = i * stride + a - pad, q = j * stride + b - pad;
                if (r < 0 || q < 0 || r >= h || q >= wd) continue;
                acc += w[((o * cin + c) * k + a) * k + b] * x[((s * cin + c) * h + r) * wd + q];
              }
          y[((s * cout + o) * ho + i) * wo + j] = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("shape and tensor invariants") {
  CHECK(Shape{2, 3, 4}.size() == 24);
  CHECK(Shape{0, 3}.size() == 0);
  CHECK_THROWS_AS(Shape({2, 0}), StructuralError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, {1.f, 2.f, 3.f}), StructuralError);
  Tensor<float> t(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows(1, 2).values()[0] == 3.f);
  const std::vector<int> idx{2, 0};
  const auto g = t.gather(idx);
  CHECK(g.values()[0] == 5.f);
  CHECK(g.values()[3] == 2.f);
  CHECK_THROWS_AS(t.reshaped(Shape{4, 2}), StructuralError);
}

TEST_CASE("identity linear layer passes the input through") {
  auto net = single_linear(3, 3);
  auto& w = net.params[0].values;
  w.setZero();
  w[0] = w[4] = w[8] = 1.f;
  net.params[1].values.setZero();
  const auto norm = NormState<float>::fresh(net);
  const Tensor<float> x(Shape{1, 3}, {1, 2, 3});
  const auto y = forward(net, x, nullptr, norm);
  CHECK(y.values() == x.values());

  SUBCASE("an all-zero mask removes weights, the bias stays with its own bit") {
    net.params[1].values << 0.5f, -1.f, 2.f;
    TaskMaskSet m = TaskMaskSet::empty(net);
    const auto zero = forward(net, x, &m, norm);
    CHECK(zero.values().isZero(0));
    m.params[1].set();
    const auto bias_only = forward(net, x, &m, norm);
    CHECK(bias_only.values() == net.params[1].values);
  }
}

TEST_CASE("two-layer mlp matches hand matrix arithmetic") {
  NetworkBuilder<float> b(Shape{2});
  b.linear(2).relu().linear(1);
  Rng rng(3);
  auto net = b.build(rng);
  net.params[0].values << 1, -2, 3, 0.5f;
  net.params[1].values << 0.5f, -1;
  net.params[2].values << 2, -1;
  net.params[3].values << 0.25f;
  const Tensor<float> x(Shape{2, 2}, {1, 1, -2, 4});
  // h1 = relu([1-2+0.5, 3+0.5-1]) = (0, 2.5); y = 2*0 - 2.5 + 0.25
  // h2 = relu([-2-8+0.5, -6+2-1]) = (0, 0); y = 0.25
  const auto y = forward(net, x, nullptr, NormState<float>::fresh(net));
  CHECK(y.values()[0] == doctest::Approx(-2.25).epsilon(1e-6));
  CHECK(y.values()[1] == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("masked forward equals forward on explicitly zeroed weights, bitwise") {
  Rng rng(11);
  for (bool conv : {false, true}) {
    auto net = conv ? test::small_convnet<float>(Shape{2, 6, 6}, 3, true, 5) : test::mlp<float>(7, {9, 5}, true, 5);
    const Shape in = conv ? Shape{4, 2, 6, 6} : Shape{4, 7};
    const auto x = test::random_tensor<float>(in, rng);
    auto norm = NormState<float>::fresh(net);
    for (auto& l : norm.layers) {
      for (Index c = 0; c < l.gamma.size(); ++c) {
        l.gamma[c] = static_cast<float>(rng.uniform(0.5, 1.5));
        l.running_mean[c] = static_cast<float>(rng.normal());
        l.running_var[c] = static_cast<float>(rng.uniform(0.5, 2.0));
      }
    }
    TaskMaskSet m = TaskMaskSet::empty(net);
    for (auto& bits : m.params) {
      for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = rng.uniform() < 0.6;
    }
    auto zeroed = net;
    for (std::size_t p = 0; p < zeroed.params.size(); ++p) {
      for (Index i = 0; i < zeroed.params[p].size(); ++i) {
        if (!m.params[p].test(static_cast<std::size_t>(i))) zeroed.params[p].values[i] = 0.f;
      }
    }
    const auto a = forward(net, x, &m, norm);
    const auto b = forward(zeroed, x, nullptr, norm);
    CHECK(a.values() == b.values());
  }
}

TEST_CASE("conv2d matches a direct convolution") {
  Rng rng(4);
  for (auto [k, stride, pad] : {std::tuple<Index, Index, Index>{3, 1, 1}, {3, 2, 1}, {1, 1, 0}, {3, 1, 0}}) {
    NetworkBuilder<double> b(Shape{2, 5, 5});
    b.conv2d(3, k, stride, pad).flatten();
    auto net = b.build(rng);
    for (Index i = 0; i < net.params[1].size(); ++i) net.params[1].values[i] = rng.normal();
    const auto x = test::random_tensor<double>(Shape{2, 2, 5, 5}, rng);
    const auto y = forward(net, x, nullptr, NormState<double>::fresh(net));
    const auto ref = naive_conv(x, net.params[0].values, net.params[1].values, 3, k, stride, pad);
    REQUIRE(y.size() == ref.size());
    CHECK((y.values() - ref.values()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("average pooling, global pooling and residual add") {
  Rng rng(1);
  Tensor<float> x(Shape{1, 1, 4, 4});
  for (Index i = 0; i < 16; ++i) x[i] = static_cast<float>(i);
  {
    NetworkBuilder<float> b(Shape{1, 4, 4});
    b.avg_pool(2).flatten();
    const auto net = b.build(rng);
    const auto y = forward(net, x, nullptr, NormState<float>::fresh(net));
    CHECK(y.values() == Vector<float>((Vector<float>(4) << 2.5f, 4.5f, 10.5f, 12.5f).finished()));
  }
  {
    NetworkBuilder<float> b(Shape{1, 4, 4});
    b.avg_pool(0).flatten();
    const auto net = b.build(rng);
    CHECK(forward(net, x, nullptr, NormState<float>::fresh(net)).values()[0] == 7.5f);
  }
  {
    NetworkBuilder<float> b(Shape{3});
    b.relu().residual_add(0);
    const auto net = b.build(rng);
    const Tensor<float> v(Shape{1, 3}, {-1, 2, 3});
    const auto y = forward(net, v, nullptr, NormState<float>::fresh(net));
    CHECK(y.values() == Vector<float>((Vector<float>(3) << -1, 4, 6).finished()));
  }
  NetworkBuilder<float> bad(Shape{1, 3, 3});
  CHECK_THROWS_AS(bad.avg_pool(2), StructuralError);
}

TEST_CASE("batch norm in inference mode uses running statistics") {
  NetworkBuilder<float> b(Shape{2});
  b.batch_norm();
  Rng rng(1);
  const auto net = b.build(rng);
  auto norm = NormState<float>::fresh(net);
  norm.layers[0].running_mean << 1, -1;
  norm.layers[0].running_var << 4, 0.25f;
  norm.layers[0].gamma << 2, 1;
  norm.layers[0].beta << 0, 3;
  const Tensor<float> x(Shape{1, 2}, {3, 0});
  const auto y = forward(net, x, nullptr, norm);
  CHECK(y.values()[0] == doctest::Approx(2.0 * 2.0 / std::sqrt(4.0 + 1e-5)));
  CHECK(y.values()[1] == doctest::Approx(3.0 + 1.0 / std::sqrt(0.25 + 1e-5)));
}

TEST_CASE("batch norm in training mode updates running statistics") {
  NetworkBuilder<double> b(Shape{1});
  b.batch_norm();
  Rng rng(1);
  const auto net = b.build(rng);
  auto norm = NormState<double>::fresh(net);
  Trace<double> trace;
  const Tensor<double> x(Shape{4, 1}, {1, 2, 3, 6});
  const auto y = forward_train(net, x, nullptr, norm, trace);
  CHECK(y.values().sum() == doctest::Approx(0.0));
  CHECK(norm.layers[0].running_mean[0] == doctest::Approx(0.1 * 3.0));
  // unbiased variance of {1,2,3,6} is 14/3
  CHECK(norm.layers[0].running_var[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0));
  Trace<double> t1;
  CHECK_THROWS_AS(forward_train(net, Tensor<double>(Shape{1, 1}, {1.0}), nullptr, norm, t1), InputError);
}

TEST_CASE("forward rejects bad shapes and reports non-finite activations") {
  auto net = test::mlp<float>(3, {4}, false, 2);
  const auto norm = NormState<float>::fresh(net);
  CHECK_THROWS_AS(forward(net, Tensor<float>(Shape{1, 4}), nullptr, norm), StructuralError);
  auto other = test::mlp<float>(3, {5}, false, 2);
  const TaskMaskSet wrong = TaskMaskSet::full(other);
  CHECK_THROWS_AS(forward(net, Tensor<float>(Shape{1, 3}), &wrong, norm), StructuralError);
  Tensor<float> x(Shape{1, 3});
  x[0] = std::numeric_limits<float>::infinity();
  try {
    forward(net, x, nullptr, norm);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
    CHECK(e.kind() == ErrorKind::numeric);
  }
}

TEST_CASE("cross entropy gradients") {
  SUBCASE("equal logits give softmax minus one-hot") {
    Matrix<double> logits = Matrix<double>::Constant(1, 4, 0.7);
    const std::vector<int> y{2};
    const auto r = cross_entropy(logits, y);
    for (Index k = 0; k < 4; ++k) CHECK(r.grad(0, k) == doctest::Approx(0.25 - (k == 2 ? 1.0 : 0.0)));
    CHECK(r.loss == doctest::Approx(std::log(4.0)));
  }
  SUBCASE("a margin of 20 leaves almost no signal") {
    Matrix<double> logits = Matrix<double>::Zero(3, 5);
    const std::vector<int> y{0, 3, 4};
    for (Index i = 0; i < 3; ++i) logits(i, y[static_cast<std::size_t>(i)]) = 20.0;
    CHECK(cross_entropy(logits, y).grad.norm() < 1e-6);
  }
  SUBCASE("labels outside the head are rejected") {
    Matrix<float> logits = Matrix<float>::Zero(2, 3);
    const std::vector<int> y{0, 3};
    CHECK_THROWS_AS(cross_entropy(logits, y), InputError);
    const std::vector<int> neg{-1, 0};
    CHECK_THROWS_AS(cross_entropy(logits, neg), InputError);
  }
}

TEST_CASE("forward and backward are deterministic") {
  Rng rng(8);
  auto net = test::small_convnet<float>(Shape{1, 8, 8}, 4, true, 3);
  Rng hr(2);
  auto head = Head<float>::init(3, net.feature_dim(), hr);
  const auto x = test::random_tensor<float>(Shape{6, 1, 8, 8}, rng);
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  auto run = [&] {
    auto n = net;
    auto h = head;
    auto norm = NormState<float>::fresh(n);
    const double loss = compute_gradients(n, h, norm, nullptr, x, y);
    return std::make_tuple(loss, n.params[0].grads, h.weight_grad, norm.layers[0].running_var);
  };
  CHECK(run() == run());
}
