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

#include <cstdint>
#include <vector>

#include "cps/controller.hpp"
#include "cps/data.hpp"
#include "cps/network.hpp"
#include "cps/rng.hpp"
#include "cps/tensor.hpp"

namespace cps::test {

template <typename Scalar>
Tensor<Scalar> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(scale * rng.normal());
  return t;
}

template <typename Scalar>
Network<Scalar> mlp(Index in, std::vector<Index> hidden, bool batch_norm, std::uint64_t seed) {
  NetworkBuilder<Scalar> b(Shape{in});
  for (Index w : hidden) {
    b.linear(w);
    if (batch_norm) b.batch_norm();
    b.relu();
  }
  Rng rng(seed);
  return b.build(rng);
}

/// conv -> bn -> relu -> [conv -> bn -> relu -> conv -> bn -> add -> relu] -> pool -> flatten
template <typename Scalar>
Network<Scalar> small_convnet(Shape input, Index channels, bool residual, std::uint64_t seed) {
  NetworkBuilder<Scalar> b(input);
  b.conv2d(channels, 3, 1, 1).batch_norm().relu();
  if (residual) {
    const Index skip = b.point();
    b.conv2d(channels, 3, 1, 1).batch_norm().relu().conv2d(channels, 3, 1, 1).batch_norm().residual_add(skip).relu();
  }
  b.conv2d(channels, 3, 2, 1).relu().avg_pool(0).flatten();
  Rng rng(seed);
  return b.build(rng);
}

inline LearnConfig quick_learn(int epochs = 20, std::uint64_t seed = 1) {
  LearnConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.optim.lr = 0.01;
  c.optim.weight_decay = 1e-3;
  c.prune.iterations = 2;
  c.prune.retrain_epochs = 3;
  c.seed = seed;
  return c;
}

/// Integer labels of a flat vector of global classes.
inline std::vector<int> iota_labels(Index n, int classes) {
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(i % classes);
  return out;
}

}  // namespace cps::test
