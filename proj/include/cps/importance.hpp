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

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

#include "cps/error.hpp"
#include "cps/forward.hpp"
#include "cps/mask.hpp"
#include "cps/network.hpp"
#include "cps/tensor.hpp"

namespace cps {

/// Connection importance per receiving neuron. Row j holds the scores of
/// every incoming connection followed by the bias score; a non-degenerate
/// row is non-negative and sums to one.
struct ImportanceMatrix {
  Eigen::MatrixXd scores;
  std::vector<bool> degenerate;  // zero total signal: row is all zero

  Index rows() const noexcept { return scores.rows(); }
  Index inputs() const noexcept { return scores.cols() - 1; }
};

namespace detail {

/// contributions: receiving x incoming mean absolute signals.
inline ImportanceMatrix normalize_contributions(Eigen::MatrixXd contributions, const Eigen::VectorXd& abs_bias) {
  const Index rows = contributions.rows(), inputs = contributions.cols();
  ImportanceMatrix m;
  m.scores.resize(rows, inputs + 1);
  m.degenerate.assign(static_cast<std::size_t>(rows), false);
  for (Index j = 0; j < rows; ++j) {
    const double denom = contributions.row(j).sum() + abs_bias[j];
    if (!(denom > 0.0)) {
      m.scores.row(j).setZero();
      m.degenerate[static_cast<std::size_t>(j)] = true;
      continue;
    }
    m.scores.row(j).head(inputs) = contributions.row(j) / denom;
    m.scores(j, inputs) = abs_bias[j] / denom;
  }
  return m;
}

}  // namespace detail

/// Importance of fully connected links:
///   s_ij = mean_n |w_ji x_ni| / (sum_k mean_n |w_jk x_nk| + |b_j|)
/// with the bias scored as |b_j| over the same denominator.
/// `weights` is receiving x incoming, `activations` is samples x incoming.
template <typename DW, typename DB, typename DX>
ImportanceMatrix importance_scores_fc(const Eigen::MatrixBase<DW>& weights, const Eigen::MatrixBase<DB>& bias,
                                      const Eigen::MatrixBase<DX>& activations) {
  if (activations.rows() < 1) throw InputError("importance scores need at least one sample");
  if (activations.cols() != weights.cols() || bias.size() != weights.rows()) {
    throw StructuralError("importance score operands have mismatched shapes");
  }
  const Eigen::RowVectorXd mean_abs = activations.template cast<double>().cwiseAbs().colwise().mean();
  Eigen::MatrixXd contributions = weights.template cast<double>().cwiseAbs();
  contributions.array().rowwise() *= mean_abs.array();
  return detail::normalize_contributions(std::move(contributions), bias.template cast<double>().cwiseAbs());
}

/// Convolutional analogue: the "connection" from input channel i to output
/// channel j is the whole k x k kernel, and its signal is the partial
/// convolution of channel i with that kernel. Scores use the mean absolute
/// partial output over samples and output positions, normalized per output
/// channel together with |b_j|.
template <typename Scalar>
ImportanceMatrix importance_scores_conv(const Tensor<Scalar>& kernels, const Vector<Scalar>& bias,
                                        const Tensor<Scalar>& activations, Index stride = 1, Index padding = 0) {
  const Shape& ks = kernels.shape();
  const Shape& as = activations.shape();
  if (ks.rank() != 4 || ks[2] != ks[3]) throw StructuralError("kernels must be Cout x Cin x k x k");
  if (as.rank() != 4 || as[1] != ks[1]) throw StructuralError("activations must be N x Cin x H x W");
  if (bias.size() != ks[0]) throw StructuralError("bias length must equal output channels");
  const Index n = as[0];
  if (n < 1) throw InputError("importance scores need at least one sample");

  const Index cout = ks[0], cin = ks[1], k = ks[2];
  const Index ho = (as[2] + 2 * padding - k) / stride + 1;
  const Index wo = (as[3] + 2 * padding - k) / stride + 1;
  const detail::ConvGeometry g{cin, as[2], as[3], cout, k, stride, padding, ho, wo};
  const Index taps = k * k;

  Eigen::Map<const Matrix<Scalar>> wm(kernels.data(), cout, g.patch());
  Eigen::MatrixXd totals = Eigen::MatrixXd::Zero(cout, cin);
  Matrix<Scalar> col;
  Matrix<Scalar> partial;
  for (Index s = 0; s < n; ++s) {
    detail::im2col(activations.data() + s * cin * g.h * g.w, g, col);
    for (Index c = 0; c < cin; ++c) {
      partial.noalias() = wm.middleCols(c * taps, taps) * col.middleRows(c * taps, taps);
      totals.col(c) += partial.template cast<double>().cwiseAbs().rowwise().sum();
    }
  }
  totals /= static_cast<double>(n * g.out_area());
  return detail::normalize_contributions(std::move(totals), bias.template cast<double>().cwiseAbs());
}

/// Keeps the fewest top-scoring connections whose scores reach `alpha` of
/// the row total; every score equal to the last kept one is kept too, and
/// zero scores are never kept. A degenerate (all-zero) row keeps nothing.
inline std::vector<bool> prune_neuron(std::span<const double> scores, double alpha) {
  if (!(alpha > 0.0) || alpha > 1.0) throw InputError("alpha must lie in (0, 1]");
  std::vector<bool> keep(scores.size(), false);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double total = 0.0;
  for (std::size_t i : order) total += scores[i];
  if (!(total > 0.0)) return keep;

  // Summing in the same order makes the running sum hit `total` exactly at
  // the last non-zero score, so alpha = 1 stops there.
  const double target = alpha * total;
  double running = 0.0;
  double threshold = 0.0;
  for (std::size_t i : order) {
    running += scores[i];
    if (running >= target) {
      threshold = scores[i];
      break;
    }
  }
  for (std::size_t i = 0; i < scores.size(); ++i) keep[i] = scores[i] > 0.0 && scores[i] >= threshold;
  return keep;
}

/// Signed mean contribution of each active link to its receiving neuron:
///   s_ji = mean_n w_ji * x_ni  if the link is active, else 0.
/// `weights` is receiving x incoming, `features` is samples x incoming and
/// `active` (optional) is a row-major bitset over `weights`.
template <typename DW, typename DX>
Eigen::MatrixXd signed_contribution_scores(const Eigen::MatrixBase<DW>& weights, const Eigen::MatrixBase<DX>& features,
                                           const Bitset* active = nullptr) {
  if (features.rows() < 1) throw InputError("contribution scores need at least one sample");
  if (features.cols() != weights.cols()) throw StructuralError("feature width does not match the weights");
  const Eigen::RowVectorXd mean = features.template cast<double>().colwise().mean();
  Eigen::MatrixXd s = weights.template cast<double>();
  s.array().rowwise() *= mean.array();
  if (active != nullptr) {
    if (active->size() != static_cast<std::size_t>(s.size())) throw StructuralError("mask size does not match weights");
    for (Index j = 0; j < s.rows(); ++j) {
      for (Index i = 0; i < s.cols(); ++i) {
        if (!active->test(static_cast<std::size_t>(j * s.cols() + i))) s(j, i) = 0.0;
      }
    }
  }
  return s;
}

/// Importance matrix of backbone layer `layer` under `mask`, given the
/// trace of a forward pass with the same mask.
template <typename Scalar>
ImportanceMatrix layer_importance(const Network<Scalar>& net, std::size_t layer, const TaskMaskSet& mask,
                                  const Trace<Scalar>& trace) {
  const LayerSpec& l = net.layers.at(layer);
  const Vector<Scalar> w = detail::effective_values(net.params[l.weight], &mask, l.weight);
  const Vector<Scalar> b = detail::effective_values(net.params[l.bias], &mask, l.bias);
  const Tensor<Scalar>& x = trace.points.at(layer);
  if (l.kind == LayerKind::linear) {
    return importance_scores_fc(Eigen::Map<const Matrix<Scalar>>(w.data(), l.out, l.in), b, x.matrix());
  }
  if (l.kind == LayerKind::conv2d) {
    return importance_scores_conv(Tensor<Scalar>(net.params[l.weight].shape, w), b, x, l.stride, l.padding);
  }
  throw StructuralError("layer " + std::to_string(layer) + " has no connections to score");
}

}  // namespace cps
