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

#include "cps/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "cps/error.hpp"

namespace cps {

EvalMatrix::EvalMatrix(Index tasks) {
  if (tasks < 0) throw InputError("negative task count");
  values_ = Eigen::MatrixXd::Constant(tasks, tasks, std::numeric_limits<double>::quiet_NaN());
}

void EvalMatrix::grow(Index tasks) {
  if (tasks <= this->tasks()) return;
  Eigen::MatrixXd next = Eigen::MatrixXd::Constant(tasks, tasks, std::numeric_limits<double>::quiet_NaN());
  next.topLeftCorner(values_.rows(), values_.cols()) = values_;
  values_ = std::move(next);
}

void EvalMatrix::check(Index after, Index task) const {
  if (task < 1 || after < task || after > tasks()) {
    throw InputError("R(" + std::to_string(after) + ", " + std::to_string(task) + ") is outside the lower triangle of a " +
                     std::to_string(tasks()) + "-task matrix");
  }
}

void EvalMatrix::set(Index after, Index task, double accuracy) {
  check(after, task);
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw InputError("accuracy must lie in [0, 1]");
  values_(after - 1, task - 1) = accuracy;
}

double EvalMatrix::at(Index after, Index task) const {
  check(after, task);
  const double v = values_(after - 1, task - 1);
  if (std::isnan(v)) throw StateError("R(" + std::to_string(after) + ", " + std::to_string(task) + ") is not set");
  return v;
}

bool EvalMatrix::has(Index after, Index task) const {
  check(after, task);
  return !std::isnan(values_(after - 1, task - 1));
}

bool EvalMatrix::row_complete(Index after) const {
  if (after < 1 || after > tasks()) return false;
  for (Index t = 1; t <= after; ++t) {
    if (!has(after, t)) return false;
  }
  return true;
}

std::string EvalMatrix::to_csv(double scale) const {
  std::ostringstream out;
  out << "after";
  for (Index t = 1; t <= tasks(); ++t) out << ",task" << t;
  out << '\n' << std::setprecision(17);
  for (Index a = 1; a <= tasks(); ++a) {
    out << a;
    for (Index t = 1; t <= tasks(); ++t) {
      out << ',';
      if (t <= a && has(a, t)) out << at(a, t) * scale;
    }
    out << '\n';
  }
  return out.str();
}

namespace {

void require_row(const EvalMatrix& r, Index t) {
  if (t < 1 || t > r.tasks()) throw StateError("no row " + std::to_string(t) + " in the accuracy matrix");
  if (!r.row_complete(t)) throw StateError("row " + std::to_string(t) + " of the accuracy matrix is incomplete");
}

}  // namespace

double acc(const EvalMatrix& r, Index t) {
  require_row(r, t);
  double sum = 0.0;
  for (Index i = 1; i <= t; ++i) sum += r.at(t, i);
  return sum / static_cast<double>(t);
}

double bwt(const EvalMatrix& r, Index t) {
  if (t < 2) throw StateError("backward transfer needs at least two tasks");
  require_row(r, t);
  double sum = 0.0;
  for (Index i = 1; i < t; ++i) sum += r.at(i, i) - r.at(t, i);
  return sum / static_cast<double>(t - 1);
}

std::vector<double> acc_history(const EvalMatrix& r, Index t) {
  std::vector<double> out;
  for (Index i = 1; i <= t; ++i) out.push_back(acc(r, i));
  return out;
}

double aia(const EvalMatrix& r, Index t) {
  require_row(r, t);
  const auto history = acc_history(r, t);
  double sum = 0.0;
  for (double a : history) sum += a;
  return sum / static_cast<double>(t);
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw InputError("nothing to summarize");
  Summary s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

}  // namespace cps
