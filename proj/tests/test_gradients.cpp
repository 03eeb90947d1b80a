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

#include <iostream>

#include "gradcheck.hpp"
#include "support.hpp"

using namespace cps;

namespace {

void expect_close(test::GradProblem p, std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  const auto r = test::check_gradients(p, samples, rng);
  INFO("worst: " << r.worst << ", kinks skipped " << r.skipped_kinks);
  CHECK(r.checked >= samples / 2);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.masked_out_grads_zero);
}

}  // namespace

TEST_CASE("finite differences: mlp with batch norm") {
  Rng rng(21);
  expect_close(test::make_problem(test::mlp<double>(6, {8, 7}, true, 1), Shape{5, 6}, 4, rng, false), 150, 1);
}

TEST_CASE("finite differences: mlp without batch norm, masked") {
  Rng rng(22);
  expect_close(test::make_problem(test::mlp<double>(5, {9, 6, 4}, false, 2), Shape{4, 5}, 3, rng, true), 150, 2);
}

TEST_CASE("finite differences: residual convnet, masked") {
  Rng rng(23);
  expect_close(test::make_problem(test::small_convnet<double>(Shape{2, 6, 6}, 3, true, 3), Shape{3, 2, 6, 6}, 3, rng,
                                  true),
               150, 3);
}

TEST_CASE("finite differences: strided conv with pooling") {
  Rng rng(24);
  NetworkBuilder<double> b(Shape{1, 8, 8});
  b.conv2d(2, 3, 2, 1).relu().avg_pool(2).flatten().linear(5).relu();
  Rng init(4);
  expect_close(test::make_problem(b.build(init), Shape{4, 1, 8, 8}, 3, rng, false), 100, 4);
}
