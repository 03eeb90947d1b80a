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

#include <span>
#include <string>
#include <vector>

namespace cps {

using Index = Eigen::Index;

/// R(t2, t1): accuracy on task t1 after learning tasks 1..t2, stored as a
/// fraction. Both indices are 1-based; unset entries hold NaN.
class EvalMatrix {
 public:
  explicit EvalMatrix(Index tasks = 0);

  Index tasks() const noexcept { return values_.rows(); }
  void grow(Index tasks);

  void set(Index after, Index task, double accuracy);
  double at(Index after, Index task) const;
  bool has(Index after, Index task) const;
  bool row_complete(Index after) const;

  const Eigen::MatrixXd& values() const noexcept { return values_; }

  /// Lower triangle as CSV, one row per step, values multiplied by `scale`;
  /// cells above the diagonal are empty.
  std::string to_csv(double scale = 1.0) const;

 private:
  void check(Index after, Index task) const;
  Eigen::MatrixXd values_;
};

double acc(const EvalMatrix& r, Index t);
double bwt(const EvalMatrix& r, Index t);
double aia(const EvalMatrix& r, Index t);

/// acc(r, 1..t)
std::vector<double> acc_history(const EvalMatrix& r, Index t);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

Summary summarize(std::span<const double> values);

}  // namespace cps
