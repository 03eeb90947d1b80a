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

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cps/error.hpp"
#include "cps/mask.hpp"
#include "cps/network.hpp"
#include "cps/tensor.hpp"

namespace cps {

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kNormMomentum = 0.1;

/// Activations recorded by a forward pass; consumed by backward() and by
/// importance-score estimation (point i is the input signal of layer i).
template <typename Scalar>
struct Trace {
  std::vector<Tensor<Scalar>> points;
  std::vector<Vector<Scalar>> batch_mean;     // per norm slot, training only
  std::vector<Vector<Scalar>> batch_inv_std;  // per norm slot, training only
  bool training = false;
};

namespace detail {

template <typename Scalar>
Vector<Scalar> effective_values(const MaskedParam<Scalar>& p, const TaskMaskSet* mask, int index) {
  if (mask == nullptr) return p.values;
  const Bitset& bits = mask->params[static_cast<std::size_t>(index)];
  Vector<Scalar> out(p.size());
  for (Index i = 0; i < p.size(); ++i) out[i] = bits.test(static_cast<std::size_t>(i)) ? p.values[i] : Scalar(0);
  return out;
}

template <typename Scalar>
void accumulate_masked(MaskedParam<Scalar>& p, const TaskMaskSet* mask, int index, const Scalar* grad) {
  if (mask == nullptr) {
    for (Index i = 0; i < p.size(); ++i) p.grads[i] += grad[i];
    return;
  }
  const Bitset& bits = mask->params[static_cast<std::size_t>(index)];
  for (Index i = 0; i < p.size(); ++i) {
    if (bits.test(static_cast<std::size_t>(i))) p.grads[i] += grad[i];
  }
}

struct ConvGeometry {
  Index cin, h, w, cout, k, stride, pad, ho, wo;

  Index patch() const { return cin * k * k; }
  Index out_area() const { return ho * wo; }
};

inline ConvGeometry conv_geometry(const LayerSpec& l, const Shape& in, const Shape& out) {
  return {in[0], in[1], in[2], out[0], l.kernel, l.stride, l.padding, out[1], out[2]};
}

/// Unfolds one CxHxW image into a (C*k*k) x (Ho*Wo) patch matrix.
template <typename Scalar>
void im2col(const Scalar* img, const ConvGeometry& g, Matrix<Scalar>& col) {
  col.resize(g.patch(), g.out_area());
  for (Index c = 0; c < g.cin; ++c) {
    for (Index kh = 0; kh < g.k; ++kh) {
      for (Index kw = 0; kw < g.k; ++kw) {
        Scalar* row = col.row((c * g.k + kh) * g.k + kw).data();
        for (Index oh = 0; oh < g.ho; ++oh) {
          const Index ih = oh * g.stride - g.pad + kh;
          for (Index ow = 0; ow < g.wo; ++ow) {
            const Index iw = ow * g.stride - g.pad + kw;
            const bool inside = ih >= 0 && ih < g.h && iw >= 0 && iw < g.w;
            row[oh * g.wo + ow] = inside ? img[(c * g.h + ih) * g.w + iw] : Scalar(0);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates patch gradients back into the image.
template <typename Scalar>
void col2im(const Matrix<Scalar>& col, const ConvGeometry& g, Scalar* img) {
  for (Index c = 0; c < g.cin; ++c) {
    for (Index kh = 0; kh < g.k; ++kh) {
      for (Index kw = 0; kw < g.k; ++kw) {
        const Scalar* row = col.row((c * g.k + kh) * g.k + kw).data();
        for (Index oh = 0; oh < g.ho; ++oh) {
          const Index ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.h) continue;
          for (Index ow = 0; ow < g.wo; ++ow) {
            const Index iw = ow * g.stride - g.pad + kw;
            if (iw >= 0 && iw < g.w) img[(c * g.h + ih) * g.w + iw] += row[oh * g.wo + ow];
          }
        }
      }
    }
  }
}

/// Channel count and per-channel spatial extent of a point shape.
inline std::pair<Index, Index> channel_layout(const Shape& sample) {
  return {sample[0], sample.size() / sample[0]};
}

template <typename Scalar>
Tensor<Scalar> linear_forward(const Tensor<Scalar>& x, const Vector<Scalar>& w, const Vector<Scalar>& b,
                              const LayerSpec& l) {
  Eigen::Map<const Matrix<Scalar>> wm(w.data(), l.out, l.in);
  Matrix<Scalar> y = x.matrix() * wm.transpose();
  y.rowwise() += b.transpose();
  return Tensor<Scalar>(Shape{x.batch(), l.out}, Eigen::Map<const Vector<Scalar>>(y.data(), y.size()));
}

template <typename Scalar>
Tensor<Scalar> conv_forward(const Tensor<Scalar>& x, const Vector<Scalar>& w, const Vector<Scalar>& b,
                            const ConvGeometry& g) {
  const Index n = x.batch();
  Tensor<Scalar> y(Shape{n, g.cout, g.ho, g.wo});
  Eigen::Map<const Matrix<Scalar>> wm(w.data(), g.cout, g.patch());
  Matrix<Scalar> col;
  for (Index s = 0; s < n; ++s) {
    im2col(x.data() + s * g.cin * g.h * g.w, g, col);
    Eigen::Map<Matrix<Scalar>> out(y.data() + s * g.cout * g.out_area(), g.cout, g.out_area());
    out.noalias() = wm * col;
    out.colwise() += b;
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> norm_forward(const Tensor<Scalar>& x, const NormLayerState<Scalar>& st, NormLayerState<Scalar>* update,
                            Vector<Scalar>* mean_out, Vector<Scalar>* inv_std_out) {
  const auto [channels, area] = channel_layout(x.shape().sample());
  const Index n = x.batch();
  Tensor<Scalar> y(x.shape());
  Vector<Scalar> mean(channels), inv_std(channels);
  if (update != nullptr) {
    const Index m = n * area;
    if (m < 2) throw InputError("batch norm in training mode needs more than one value per channel");
    for (Index c = 0; c < channels; ++c) {
      Scalar sum = 0;
      for (Index s = 0; s < n; ++s) {
        for (Index j = 0; j < area; ++j) sum += x[(s * channels + c) * area + j];
      }
      const Scalar mu = sum / Scalar(m);
      Scalar sq = 0;
      for (Index s = 0; s < n; ++s) {
        for (Index j = 0; j < area; ++j) {
          const Scalar d = x[(s * channels + c) * area + j] - mu;
          sq += d * d;
        }
      }
      const Scalar var = sq / Scalar(m);
      mean[c] = mu;
      inv_std[c] = Scalar(1) / std::sqrt(var + Scalar(kNormEpsilon));
      update->running_mean[c] = (Scalar(1) - Scalar(kNormMomentum)) * update->running_mean[c] + Scalar(kNormMomentum) * mu;
      update->running_var[c] = (Scalar(1) - Scalar(kNormMomentum)) * update->running_var[c] +
                               Scalar(kNormMomentum) * var * Scalar(m) / Scalar(m - 1);
    }
  } else {
    for (Index c = 0; c < channels; ++c) {
      mean[c] = st.running_mean[c];
      inv_std[c] = Scalar(1) / std::sqrt(st.running_var[c] + Scalar(kNormEpsilon));
    }
  }
  for (Index s = 0; s < n; ++s) {
    for (Index c = 0; c < channels; ++c) {
      const Scalar scale = st.gamma[c] * inv_std[c];
      for (Index j = 0; j < area; ++j) {
        const Index i = (s * channels + c) * area + j;
        y[i] = (x[i] - mean[c]) * scale + st.beta[c];
      }
    }
  }
  if (mean_out) *mean_out = mean;
  if (inv_std_out) *inv_std_out = inv_std;
  return y;
}

template <typename Scalar>
Tensor<Scalar> pool_forward(const Tensor<Scalar>& x, const LayerSpec& l, const Shape& out_sample) {
  const Shape in = x.shape().sample();
  const Index n = x.batch(), c = in[0], h = in[1], w = in[2];
  const Index kh = l.kernel == 0 ? h : l.kernel;
  const Index kw = l.kernel == 0 ? w : l.kernel;
  const Index ho = out_sample[1], wo = out_sample[2];
  Tensor<Scalar> y(Shape::batched(n, out_sample));
  const Scalar inv = Scalar(1) / Scalar(kh * kw);
  for (Index s = 0; s < n; ++s) {
    for (Index ch = 0; ch < c; ++ch) {
      const Scalar* src = x.data() + (s * c + ch) * h * w;
      Scalar* dst = y.data() + (s * c + ch) * ho * wo;
      for (Index i = 0; i < ho; ++i) {
        for (Index j = 0; j < wo; ++j) {
          Scalar sum = 0;
          for (Index a = 0; a < kh; ++a) {
            for (Index b = 0; b < kw; ++b) sum += src[(i * kh + a) * w + j * kw + b];
          }
          dst[i * wo + j] = sum * inv;
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> forward_impl(const Network<Scalar>& net, const Tensor<Scalar>& input, const TaskMaskSet* mask,
                            const NormState<Scalar>& norm, NormState<Scalar>* update, Trace<Scalar>* trace) {
  if (!(input.shape().sample() == net.input_shape)) {
    throw StructuralError("input sample shape " + input.shape().sample().str() + " does not match network input " +
                          net.input_shape.str());
  }
  if (mask != nullptr && !mask->fits(net)) throw StructuralError("mask layout does not match the network parameters");
  if (norm.layers.size() != net.norm_channels.size()) throw StructuralError("norm state does not match the network");

  const Index n = input.batch();
  const std::size_t depth = net.layers.size();
  std::vector<Tensor<Scalar>> local;
  std::vector<Tensor<Scalar>>& points = trace ? trace->points : local;
  points.assign(1, input);
  if (trace) {
    trace->training = update != nullptr;
    trace->batch_mean.assign(net.norm_channels.size(), {});
    trace->batch_inv_std.assign(net.norm_channels.size(), {});
  }

  for (std::size_t i = 0; i < depth; ++i) {
    const LayerSpec& l = net.layers[i];
    const Tensor<Scalar>& x = points[i];
    const Shape& out_sample = net.point_shapes[i + 1];
    Tensor<Scalar> y;
    switch (l.kind) {
      case LayerKind::linear: {
        y = linear_forward(x, effective_values(net.params[l.weight], mask, l.weight),
                           effective_values(net.params[l.bias], mask, l.bias), l);
        break;
      }
      case LayerKind::conv2d: {
        y = conv_forward(x, effective_values(net.params[l.weight], mask, l.weight),
                         effective_values(net.params[l.bias], mask, l.bias),
                         conv_geometry(l, net.point_shapes[i], out_sample));
        break;
      }
      case LayerKind::batch_norm: {
        const auto slot = static_cast<std::size_t>(l.norm);
        y = norm_forward(x, norm.layers[slot], update ? &update->layers[slot] : nullptr,
                         trace ? &trace->batch_mean[slot] : nullptr, trace ? &trace->batch_inv_std[slot] : nullptr);
        break;
      }
      case LayerKind::relu:
        y = Tensor<Scalar>(x.shape(), x.values().cwiseMax(Scalar(0)));
        break;
      case LayerKind::avg_pool:
        y = pool_forward(x, l, out_sample);
        break;
      case LayerKind::flatten:
        y = x.reshaped(Shape::batched(n, out_sample));
        break;
      case LayerKind::residual_add:
        y = Tensor<Scalar>(x.shape(), x.values() + points[static_cast<std::size_t>(l.skip_from)].values());
        break;
    }
    if (!y.all_finite()) {
      throw NumericError("non-finite activation at layer " + std::to_string(i) + " (" + to_string(l.kind) + ")");
    }
    points.push_back(std::move(y));
  }
  if (trace) return points.back();
  return std::move(points.back());
}

}  // namespace detail

/// Inference pass: batch norm uses the running statistics in `norm`. With a
/// mask, every masked-out scalar contributes exactly zero.
template <typename Scalar>
Tensor<Scalar> forward(const Network<Scalar>& net, const Tensor<Scalar>& input, const TaskMaskSet* mask,
                       const NormState<Scalar>& norm, Trace<Scalar>* trace = nullptr) {
  return detail::forward_impl(net, input, mask, norm, static_cast<NormState<Scalar>*>(nullptr), trace);
}

/// Training pass: batch norm uses batch statistics and updates the running
/// statistics in `norm`.
template <typename Scalar>
Tensor<Scalar> forward_train(const Network<Scalar>& net, const Tensor<Scalar>& input, const TaskMaskSet* mask,
                             NormState<Scalar>& norm, Trace<Scalar>& trace) {
  return detail::forward_impl(net, input, mask, norm, &norm, &trace);
}

/// Reverse pass through the backbone. Parameter gradients (restricted to
/// `mask`) and norm gradients are accumulated; the input gradient is returned.
template <typename Scalar>
Tensor<Scalar> backward(Network<Scalar>& net, NormState<Scalar>& norm, const Trace<Scalar>& trace,
                        const TaskMaskSet* mask, const Tensor<Scalar>& grad_output) {
  const std::size_t depth = net.layers.size();
  if (trace.points.size() != depth + 1) throw StructuralError("trace does not match the network");
  const Index n = trace.points.front().batch();
  if (grad_output.size() != trace.points.back().size()) throw StructuralError("output gradient has the wrong size");

  std::vector<Tensor<Scalar>> grads(depth + 1);
  grads[depth] = grad_output.reshaped(trace.points.back().shape());
  auto grad_at = [&](std::size_t p) -> Tensor<Scalar>& {
    if (grads[p].size() == 0 && trace.points[p].size() != 0) grads[p] = Tensor<Scalar>(trace.points[p].shape());
    return grads[p];
  };

  for (std::size_t i = depth; i-- > 0;) {
    const LayerSpec& l = net.layers[i];
    const Tensor<Scalar>& x = trace.points[i];
    const Tensor<Scalar>& dy = grad_at(i + 1);
    Tensor<Scalar>& dx = grad_at(i);
    switch (l.kind) {
      case LayerKind::linear: {
        const Vector<Scalar> w = detail::effective_values(net.params[l.weight], mask, l.weight);
        Eigen::Map<const Matrix<Scalar>> wm(w.data(), l.out, l.in);
        const auto dym = dy.matrix();
        Matrix<Scalar> dw = dym.transpose() * x.matrix();
        Vector<Scalar> db = dym.colwise().sum().transpose();
        detail::accumulate_masked(net.params[l.weight], mask, l.weight, dw.data());
        detail::accumulate_masked(net.params[l.bias], mask, l.bias, db.data());
        dx.matrix() += dym * wm;
        break;
      }
      case LayerKind::conv2d: {
        const auto g = detail::conv_geometry(l, net.point_shapes[i], net.point_shapes[i + 1]);
        const Vector<Scalar> w = detail::effective_values(net.params[l.weight], mask, l.weight);
        Eigen::Map<const Matrix<Scalar>> wm(w.data(), g.cout, g.patch());
        Matrix<Scalar> dw = Matrix<Scalar>::Zero(g.cout, g.patch());
        Vector<Scalar> db = Vector<Scalar>::Zero(g.cout);
        Matrix<Scalar> col, dcol;
        for (Index s = 0; s < n; ++s) {
          detail::im2col(x.data() + s * g.cin * g.h * g.w, g, col);
          Eigen::Map<const Matrix<Scalar>> dout(dy.data() + s * g.cout * g.out_area(), g.cout, g.out_area());
          dw.noalias() += dout * col.transpose();
          db += dout.rowwise().sum();
          dcol.noalias() = wm.transpose() * dout;
          detail::col2im(dcol, g, dx.data() + s * g.cin * g.h * g.w);
        }
        detail::accumulate_masked(net.params[l.weight], mask, l.weight, dw.data());
        detail::accumulate_masked(net.params[l.bias], mask, l.bias, db.data());
        break;
      }
      case LayerKind::batch_norm: {
        const auto slot = static_cast<std::size_t>(l.norm);
        auto& st = norm.layers[slot];
        const auto [channels, area] = detail::channel_layout(x.shape().sample());
        const Index m = n * area;
        for (Index c = 0; c < channels; ++c) {
          const Scalar mu = trace.training ? trace.batch_mean[slot][c] : st.running_mean[c];
          const Scalar inv_std = trace.training ? trace.batch_inv_std[slot][c]
                                                : Scalar(1) / std::sqrt(st.running_var[c] + Scalar(kNormEpsilon));
          Scalar sum_dy = 0, sum_dy_xhat = 0;
          for (Index s = 0; s < n; ++s) {
            for (Index j = 0; j < area; ++j) {
              const Index k = (s * channels + c) * area + j;
              sum_dy += dy[k];
              sum_dy_xhat += dy[k] * (x[k] - mu) * inv_std;
            }
          }
          st.gamma_grad[c] += sum_dy_xhat;
          st.beta_grad[c] += sum_dy;
          const Scalar gamma = st.gamma[c];
          for (Index s = 0; s < n; ++s) {
            for (Index j = 0; j < area; ++j) {
              const Index k = (s * channels + c) * area + j;
              if (trace.training) {
                const Scalar xhat = (x[k] - mu) * inv_std;
                dx[k] += gamma * inv_std / Scalar(m) * (Scalar(m) * dy[k] - sum_dy - xhat * sum_dy_xhat);
              } else {
                dx[k] += gamma * inv_std * dy[k];
              }
            }
          }
        }
        break;
      }
      case LayerKind::relu:
        for (Index k = 0; k < x.size(); ++k) {
          if (x[k] > Scalar(0)) dx[k] += dy[k];
        }
        break;
      case LayerKind::avg_pool: {
        const Shape in = x.shape().sample();
        const Shape& out = net.point_shapes[i + 1];
        const Index c = in[0], h = in[1], w = in[2];
        const Index kh = l.kernel == 0 ? h : l.kernel;
        const Index kw = l.kernel == 0 ? w : l.kernel;
        const Index ho = out[1], wo = out[2];
        const Scalar inv = Scalar(1) / Scalar(kh * kw);
        for (Index s = 0; s < n; ++s) {
          for (Index ch = 0; ch < c; ++ch) {
            Scalar* dst = dx.data() + (s * c + ch) * h * w;
            const Scalar* src = dy.data() + (s * c + ch) * ho * wo;
            for (Index a = 0; a < h; ++a) {
              for (Index b = 0; b < w; ++b) dst[a * w + b] += src[(a / kh) * wo + b / kw] * inv;
            }
          }
        }
        break;
      }
      case LayerKind::flatten:
        dx.values() += dy.values();
        break;
      case LayerKind::residual_add:
        dx.values() += dy.values();
        grad_at(static_cast<std::size_t>(l.skip_from)).values() += dy.values();
        break;
    }
  }
  return grads[0];
}

/// Logits = features * W^T + b.
template <typename Scalar>
Matrix<Scalar> head_forward(const Head<Scalar>& head, const Tensor<Scalar>& features) {
  if (features.sample_size() != head.features()) throw StructuralError("feature width does not match the head");
  Matrix<Scalar> logits = features.matrix() * head.weight.transpose();
  logits.rowwise() += head.bias.transpose();
  return logits;
}

/// Accumulates head gradients; returns the feature gradient.
template <typename Scalar>
Tensor<Scalar> head_backward(Head<Scalar>& head, const Tensor<Scalar>& features, const Matrix<Scalar>& grad_logits) {
  head.weight_grad.noalias() += grad_logits.transpose() * features.matrix();
  head.bias_grad += grad_logits.colwise().sum().transpose();
  Matrix<Scalar> df = grad_logits * head.weight;
  return Tensor<Scalar>(features.shape(), Eigen::Map<const Vector<Scalar>>(df.data(), df.size()));
}

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  Matrix<Scalar> grad;  // d(mean loss) / d(logits)
};

/// Mean softmax cross-entropy over the batch.
template <typename Scalar>
LossResult<Scalar> cross_entropy(const Matrix<Scalar>& logits, std::span<const int> labels) {
  const Index n = logits.rows(), k = logits.cols();
  if (static_cast<Index>(labels.size()) != n) throw InputError("logit and label batch sizes differ");
  LossResult<Scalar> r;
  r.grad.resize(n, k);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) {
      throw InputError("label " + std::to_string(y) + " outside head range [0, " + std::to_string(k) + ")");
    }
    const Scalar top = logits.row(i).maxCoeff();
    Scalar z = 0;
    for (Index j = 0; j < k; ++j) z += std::exp(logits(i, j) - top);
    for (Index j = 0; j < k; ++j) {
      const Scalar p = std::exp(logits(i, j) - top) / z;
      r.grad(i, j) = (p - Scalar(j == y ? 1 : 0)) / Scalar(n);
    }
    r.loss += static_cast<double>(std::log(z) + top - logits(i, y));
  }
  r.loss /= static_cast<double>(std::max<Index>(n, 1));
  return r;
}

/// One forward/backward pass in training mode. Gradient buffers of the
/// backbone (restricted to `mask`), `norm` and `head` are zeroed first.
template <typename Scalar>
double compute_gradients(Network<Scalar>& net, Head<Scalar>& head, NormState<Scalar>& norm, const TaskMaskSet* mask,
                         const Tensor<Scalar>& input, std::span<const int> labels) {
  net.zero_grads();
  norm.zero_grads();
  head.zero_grads();
  Trace<Scalar> trace;
  const Tensor<Scalar> features = forward_train(net, input, mask, norm, trace);
  const auto loss = cross_entropy(head_forward(head, features), labels);
  const Tensor<Scalar> df = head_backward(head, features, loss.grad);
  backward(net, norm, trace, mask, df);
  return loss.loss;
}

}  // namespace cps
