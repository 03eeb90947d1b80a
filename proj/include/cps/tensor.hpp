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

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cps/error.hpp"

namespace cps {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Row-major dense matrix; rows are samples or receiving neurons.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dimensions of a dense tensor, outermost first. A leading batch dimension
/// may be zero (an empty batch); every other dimension is at least one.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<Index> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<Index> dims) : dims_(std::move(dims)) { validate(); }

  Index rank() const noexcept { return static_cast<Index>(dims_.size()); }
  Index operator[](Index i) const { return dims_.at(static_cast<std::size_t>(i)); }
  const std::vector<Index>& dims() const noexcept { return dims_; }

  Index size() const noexcept {
    if (dims_.empty()) return 0;
    return std::accumulate(dims_.begin(), dims_.end(), Index{1}, std::multiplies<>());
  }

  /// Shape with the leading dimension removed.
  Shape sample() const { return Shape(std::vector<Index>(dims_.begin() + 1, dims_.end())); }

  /// `sample` prefixed with a batch dimension.
  static Shape batched(Index batch, const Shape& sample) {
    std::vector<Index> d{batch};
    d.insert(d.end(), sample.dims_.begin(), sample.dims_.end());
    return Shape(std::move(d));
  }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ')';
    return os.str();
  }

 private:
  void validate() const {
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (dims_[i] < (i == 0 ? 0 : 1)) throw StructuralError("invalid tensor dimension in " + str());
    }
  }

  std::vector<Index> dims_;
};

/// Dense row-major tensor of `Scalar`. Dimension 0 is the batch.
template <typename Scalar>
class Tensor {
 public:
  using MatrixMap = Eigen::Map<Matrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const Matrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(Vector<Scalar>::Zero(shape_.size())) {}

  Tensor(Shape shape, Vector<Scalar> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_.size()) {
      throw StructuralError("tensor of shape " + shape_.str() + " given " + std::to_string(values_.size()) +
                            " values");
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Eigen::Map<const Vector<Scalar>>(values.begin(), static_cast<Index>(values.size()))) {}

  const Shape& shape() const noexcept { return shape_; }
  Index size() const noexcept { return values_.size(); }
  Index batch() const { return shape_.rank() == 0 ? 0 : shape_[0]; }
  Index sample_size() const {
    const Index n = batch();
    return n == 0 ? shape_.sample().size() : size() / n;
  }

  Vector<Scalar>& values() noexcept { return values_; }
  const Vector<Scalar>& values() const noexcept { return values_; }
  Scalar* data() noexcept { return values_.data(); }
  const Scalar* data() const noexcept { return values_.data(); }
  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  /// batch x sample_size view.
  MatrixMap matrix() { return MatrixMap(values_.data(), batch(), sample_size()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(values_.data(), batch(), sample_size()); }

  Tensor reshaped(Shape shape) const {
    if (shape.size() != size()) throw StructuralError("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(std::move(shape), values_);
  }

  /// Samples [begin, begin + count).
  Tensor rows(Index begin, Index count) const {
    const Index stride = sample_size();
    return Tensor(Shape::batched(count, shape_.sample()), values_.segment(begin * stride, count * stride));
  }

  /// Samples at the given indices, in order.
  template <typename Indices>
  Tensor gather(const Indices& indices) const {
    const Index stride = sample_size();
    Tensor out(Shape::batched(static_cast<Index>(std::size(indices)), shape_.sample()));
    Index r = 0;
    for (auto i : indices) out.values_.segment((r++) * stride, stride) = values_.segment(Index(i) * stride, stride);
    return out;
  }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(shape_, values_.template cast<To>());
  }

  bool all_finite() const { return values_.allFinite(); }

 private:
  Shape shape_;
  Vector<Scalar> values_;
};

}  // namespace cps
