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

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cps/error.hpp"
#include "cps/rng.hpp"
#include "cps/tensor.hpp"

namespace cps {

/// Task identifiers are 1-based; 0 marks a parameter no task has claimed.
using TaskId = std::int32_t;
inline constexpr TaskId kFree = 0;

enum class LayerKind : std::uint8_t { linear, conv2d, batch_norm, relu, avg_pool, flatten, residual_add };

const char* to_string(LayerKind kind) noexcept;
LayerKind layer_kind_from_string(const std::string& name);

/// One step of a feed-forward backbone. Activation point i is the input of
/// layer i; point L is the feature vector handed to the task heads.
struct LayerSpec {
  LayerKind kind{};
  Index in = 0;          // input features or channels
  Index out = 0;         // output features or channels
  Index kernel = 0;      // conv kernel or pooling window (0 = global pooling)
  Index stride = 1;
  Index padding = 0;
  Index skip_from = -1;  // residual_add: activation point added to the input
  int weight = -1;       // index into Network::params
  int bias = -1;
  int norm = -1;         // index into NormState::layers

  bool prunable() const noexcept { return kind == LayerKind::linear || kind == LayerKind::conv2d; }
};

/// A weight or bias tensor together with its gradient buffer and the
/// ownership record of every scalar. Once owner[p] != kFree the value at p
/// is immutable.
template <typename Scalar>
struct MaskedParam {
  std::string name;
  Shape shape;
  Index fan_in = 1;
  bool is_bias = false;
  Vector<Scalar> values;
  Vector<Scalar> grads;
  std::vector<TaskId> owner;

  Index size() const noexcept { return values.size(); }
  bool frozen(Index i) const { return owner[static_cast<std::size_t>(i)] != kFree; }

  Index free_count() const {
    Index n = 0;
    for (TaskId t : owner) n += (t == kFree);
    return n;
  }
};

/// He-uniform for weights, zero for biases.
template <typename Scalar>
Scalar draw_initial(const MaskedParam<Scalar>& p, Rng& rng) {
  if (p.is_bias) return Scalar(0);
  const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in));
  return static_cast<Scalar>(rng.uniform(-bound, bound));
}

template <typename Scalar>
class Network {
 public:
  Shape input_shape;               // per sample
  std::vector<LayerSpec> layers;
  std::vector<Shape> point_shapes;  // per-sample shape at points 0..L
  std::vector<MaskedParam<Scalar>> params;
  std::vector<Index> norm_channels;

  Index feature_dim() const { return point_shapes.back().size(); }
  Index parameter_count() const {
    Index n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }
  Index free_count() const {
    Index n = 0;
    for (const auto& p : params) n += p.free_count();
    return n;
  }

  void zero_grads() {
    for (auto& p : params) p.grads.setZero();
  }

  template <typename To>
  Network<To> cast() const {
    Network<To> out;
    out.input_shape = input_shape;
    out.layers = layers;
    out.point_shapes = point_shapes;
    out.norm_channels = norm_channels;
    for (const auto& p : params) {
      out.params.push_back({p.name, p.shape, p.fan_in, p.is_bias, p.values.template cast<To>(),
                            p.grads.template cast<To>(), p.owner});
    }
    return out;
  }
};

/// Per-task batch-norm affine parameters and running statistics.
template <typename Scalar>
struct NormLayerState {
  Vector<Scalar> gamma, beta, running_mean, running_var;
  Vector<Scalar> gamma_grad, beta_grad;
};

template <typename Scalar>
struct NormState {
  std::vector<NormLayerState<Scalar>> layers;

  static NormState fresh(const std::vector<Index>& channels) {
    NormState s;
    for (Index c : channels) {
      s.layers.push_back({Vector<Scalar>::Ones(c), Vector<Scalar>::Zero(c), Vector<Scalar>::Zero(c),
                          Vector<Scalar>::Ones(c), Vector<Scalar>::Zero(c), Vector<Scalar>::Zero(c)});
    }
    return s;
  }

  template <typename Net>
  static NormState fresh(const Net& net) {
    return fresh(net.norm_channels);
  }

  void zero_grads() {
    for (auto& l : layers) {
      l.gamma_grad.setZero();
      l.beta_grad.setZero();
    }
  }

  template <typename To>
  NormState<To> cast() const {
    NormState<To> out;
    for (const auto& l : layers) {
      out.layers.push_back({l.gamma.template cast<To>(), l.beta.template cast<To>(),
                            l.running_mean.template cast<To>(), l.running_var.template cast<To>(),
                            l.gamma_grad.template cast<To>(), l.beta_grad.template cast<To>()});
    }
    return out;
  }
};

/// Task-specific linear classifier on top of the backbone features.
template <typename Scalar>
struct Head {
  Matrix<Scalar> weight;  // classes x features
  Vector<Scalar> bias;
  Matrix<Scalar> weight_grad;
  Vector<Scalar> bias_grad;

  Index classes() const noexcept { return weight.rows(); }
  Index features() const noexcept { return weight.cols(); }

  static Head init(Index classes, Index features, Rng& rng) {
    Head h;
    const double bound = std::sqrt(6.0 / static_cast<double>(features));
    h.weight.resize(classes, features);
    for (Index i = 0; i < h.weight.size(); ++i) h.weight.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
    h.bias = Vector<Scalar>::Zero(classes);
    h.weight_grad = Matrix<Scalar>::Zero(classes, features);
    h.bias_grad = Vector<Scalar>::Zero(classes);
    return h;
  }

  void zero_grads() {
    weight_grad.setZero();
    bias_grad.setZero();
  }

  template <typename To>
  Head<To> cast() const {
    return {weight.template cast<To>(), bias.template cast<To>(), weight_grad.template cast<To>(),
            bias_grad.template cast<To>()};
  }
};

/// Incremental construction of a backbone with shape inference.
///
///   auto net = NetworkBuilder<float>(Shape{1, 8, 8})
///                  .conv2d(8, 3, 1, 1).batch_norm().relu()
///                  .avg_pool(0).flatten()
///                  .build(rng);
template <typename Scalar>
class NetworkBuilder {
 public:
  explicit NetworkBuilder(Shape input_shape) {
    net_.input_shape = input_shape;
    net_.point_shapes.push_back(std::move(input_shape));
  }

  /// Current activation point (the input of the next layer).
  Index point() const { return static_cast<Index>(net_.layers.size()); }
  const Shape& current() const { return net_.point_shapes.back(); }

  NetworkBuilder& linear(Index out) {
    const Shape& s = current();
    if (s.rank() != 1) throw StructuralError("linear layer needs a flat input, got " + s.str());
    LayerSpec l{LayerKind::linear, s[0], out};
    l.weight = add_param("weight", Shape{out, s[0]}, s[0]);
    l.bias = add_param("bias", Shape{out}, s[0]);
    return push(l, Shape{out});
  }

  NetworkBuilder& conv2d(Index out, Index kernel, Index stride = 1, Index padding = 0) {
    const Shape& s = current();
    if (s.rank() != 3) throw StructuralError("conv2d needs a CxHxW input, got " + s.str());
    const Index ho = (s[1] + 2 * padding - kernel) / stride + 1;
    const Index wo = (s[2] + 2 * padding - kernel) / stride + 1;
    if (kernel < 1 || stride < 1 || ho < 1 || wo < 1) throw StructuralError("conv2d geometry does not fit " + s.str());
    LayerSpec l{LayerKind::conv2d, s[0], out, kernel, stride, padding};
    const Index fan_in = s[0] * kernel * kernel;
    l.weight = add_param("weight", Shape{out, s[0], kernel, kernel}, fan_in);
    l.bias = add_param("bias", Shape{out}, fan_in);
    return push(l, Shape{out, ho, wo});
  }

  NetworkBuilder& batch_norm() {
    const Shape s = current();
    LayerSpec l{LayerKind::batch_norm, s[0], s[0]};
    l.norm = static_cast<int>(net_.norm_channels.size());
    net_.norm_channels.push_back(s[0]);
    return push(l, s);
  }

  NetworkBuilder& relu() {
    const Shape s = current();
    return push(LayerSpec{LayerKind::relu, s[0], s[0]}, s);
  }

  NetworkBuilder& avg_pool(Index window) {
    const Shape& s = current();
    if (s.rank() != 3) throw StructuralError("avg_pool needs a CxHxW input, got " + s.str());
    if (window == 0) return push(LayerSpec{LayerKind::avg_pool, s[0], s[0], 0}, Shape{s[0], 1, 1});
    if (s[1] % window != 0 || s[2] % window != 0) {
      throw StructuralError("avg_pool window " + std::to_string(window) + " does not tile " + s.str());
    }
    return push(LayerSpec{LayerKind::avg_pool, s[0], s[0], window}, Shape{s[0], s[1] / window, s[2] / window});
  }

  NetworkBuilder& flatten() {
    const Shape s = current();
    return push(LayerSpec{LayerKind::flatten, s.size(), s.size()}, Shape{s.size()});
  }

  NetworkBuilder& residual_add(Index from_point) {
    if (from_point < 0 || from_point >= point()) throw StructuralError("residual skip must reference an earlier point");
    const Shape s = current();
    if (!(net_.point_shapes[static_cast<std::size_t>(from_point)] == s)) {
      throw StructuralError("residual skip from point " + std::to_string(from_point) + " has shape " +
                            net_.point_shapes[static_cast<std::size_t>(from_point)].str() + ", expected " + s.str());
    }
    LayerSpec l{LayerKind::residual_add, s[0], s[0]};
    l.skip_from = from_point;
    return push(l, s);
  }

  /// Replays a recorded layer list (e.g. from a checkpoint manifest).
  NetworkBuilder& append(const LayerSpec& l) {
    switch (l.kind) {
      case LayerKind::linear: return linear(l.out);
      case LayerKind::conv2d: return conv2d(l.out, l.kernel, l.stride, l.padding);
      case LayerKind::batch_norm: return batch_norm();
      case LayerKind::relu: return relu();
      case LayerKind::avg_pool: return avg_pool(l.kernel);
      case LayerKind::flatten: return flatten();
      case LayerKind::residual_add: return residual_add(l.skip_from);
    }
    throw StructuralError("unknown layer kind");
  }

  Network<Scalar> build(Rng& rng) const {
    if (current().rank() != 1) throw StructuralError("backbone must end in a flat feature vector");
    Network<Scalar> net = net_;
    for (auto& p : net.params) {
      for (Index i = 0; i < p.size(); ++i) p.values[i] = draw_initial(p, rng);
    }
    return net;
  }

 private:
  int add_param(const char* what, Shape shape, Index fan_in) {
    MaskedParam<Scalar> p;
    p.name = "layer" + std::to_string(point()) + "." + what;
    p.is_bias = std::string(what) == "bias";
    p.fan_in = fan_in;
    p.values = Vector<Scalar>::Zero(shape.size());
    p.grads = Vector<Scalar>::Zero(shape.size());
    p.owner.assign(static_cast<std::size_t>(shape.size()), kFree);
    p.shape = std::move(shape);
    net_.params.push_back(std::move(p));
    return static_cast<int>(net_.params.size() - 1);
  }

  NetworkBuilder& push(LayerSpec l, Shape out) {
    net_.layers.push_back(l);
    net_.point_shapes.push_back(std::move(out));
    return *this;
  }

  Network<Scalar> net_;
};

inline const char* to_string(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::linear: return "linear";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::residual_add: return "residual_add";
  }
  return "unknown";
}

inline LayerKind layer_kind_from_string(const std::string& name) {
  for (auto k : {LayerKind::linear, LayerKind::conv2d, LayerKind::batch_norm, LayerKind::relu, LayerKind::avg_pool,
                 LayerKind::flatten, LayerKind::residual_add}) {
    if (name == to_string(k)) return k;
  }
  throw FormatError("unknown layer kind '" + name + "'");
}

}  // namespace cps
