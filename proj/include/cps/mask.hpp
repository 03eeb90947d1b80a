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

#include <boost/dynamic_bitset.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cps/error.hpp"
#include "cps/network.hpp"
#include "cps/rng.hpp"

namespace cps {

/// One bit per scalar parameter, packed in 64-bit words.
using Bitset = boost::dynamic_bitset<std::uint64_t>;

/// Per-parameter-tensor bitsets for one task; entry i covers Network::params[i].
struct TaskMaskSet {
  std::vector<Bitset> params;

  template <typename Scalar>
  static TaskMaskSet full(const Network<Scalar>& net) {
    TaskMaskSet m;
    for (const auto& p : net.params) m.params.emplace_back(static_cast<std::size_t>(p.size())).set();
    return m;
  }

  template <typename Scalar>
  static TaskMaskSet empty(const Network<Scalar>& net) {
    TaskMaskSet m;
    for (const auto& p : net.params) m.params.emplace_back(static_cast<std::size_t>(p.size()));
    return m;
  }

  /// Bits set where owner != kFree.
  template <typename Scalar>
  static TaskMaskSet owned(const Network<Scalar>& net) {
    TaskMaskSet m = empty(net);
    for (std::size_t i = 0; i < net.params.size(); ++i) {
      const auto& owner = net.params[i].owner;
      for (std::size_t j = 0; j < owner.size(); ++j) m.params[i][j] = owner[j] != kFree;
    }
    return m;
  }

  bool same_layout(const TaskMaskSet& other) const {
    if (other.params.size() != params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].size() != other.params[i].size()) return false;
    }
    return true;
  }

  template <typename Scalar>
  bool fits(const Network<Scalar>& net) const {
    if (params.size() != net.params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].size() != static_cast<std::size_t>(net.params[i].size())) return false;
    }
    return true;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& b : params) n += b.count();
    return n;
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& b : params) n += b.size();
    return n;
  }

  bool is_subset_of(const TaskMaskSet& other) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].is_subset_of(other.params[i])) return false;
    }
    return true;
  }

  TaskMaskSet& operator|=(const TaskMaskSet& other) {
    require_layout(other);
    for (std::size_t i = 0; i < params.size(); ++i) params[i] |= other.params[i];
    return *this;
  }

  TaskMaskSet& operator&=(const TaskMaskSet& other) {
    require_layout(other);
    for (std::size_t i = 0; i < params.size(); ++i) params[i] &= other.params[i];
    return *this;
  }

  TaskMaskSet operator~() const {
    TaskMaskSet m = *this;
    for (auto& b : m.params) b.flip();
    return m;
  }

  friend TaskMaskSet operator|(TaskMaskSet a, const TaskMaskSet& b) { return a |= b; }
  friend TaskMaskSet operator&(TaskMaskSet a, const TaskMaskSet& b) { return a &= b; }
  bool operator==(const TaskMaskSet&) const = default;

 private:
  void require_layout(const TaskMaskSet& other) const {
    if (!same_layout(other)) throw StructuralError("mask layouts differ");
  }
};

/// Union of the masks of all previously registered tasks. Empty input
/// yields an empty set, which callers treat as "nothing frozen".
inline TaskMaskSet frozen_set(std::span<const TaskMaskSet> masks) {
  if (masks.empty()) return {};
  TaskMaskSet out = masks.front();
  for (std::size_t t = 1; t < masks.size(); ++t) out |= masks[t];
  return out;
}

/// Zeroes grads[p] for every p in `frozen`; other entries are untouched.
template <typename Scalar>
void mask_gradients(MaskedParam<Scalar>& param, const Bitset& frozen) {
  if (frozen.size() != static_cast<std::size_t>(param.size())) throw StructuralError("frozen bitset size mismatch for " + param.name);
  for (auto p = frozen.find_first(); p != Bitset::npos; p = frozen.find_next(p)) param.grads[static_cast<Index>(p)] = Scalar(0);
}

template <typename Scalar>
void mask_gradients(Network<Scalar>& net, const TaskMaskSet& frozen) {
  if (frozen.params.empty()) return;
  if (!frozen.fits(net)) throw StructuralError("frozen set layout does not match the network");
  for (std::size_t i = 0; i < net.params.size(); ++i) mask_gradients(net.params[i], frozen.params[i]);
}

/// Records `task` as owner of every still-free scalar inside `final_mask`.
/// Scalars already owned by an earlier task keep their owner. Returns the
/// number of newly frozen scalars.
template <typename Scalar>
std::size_t claim_and_freeze(Network<Scalar>& net, const TaskMaskSet& final_mask, TaskId task,
                             std::span<const TaskId> registered) {
  if (task <= kFree) throw InputError("task ids start at 1");
  for (TaskId r : registered) {
    if (r == task) throw StateError("task " + std::to_string(task) + " is already registered");
  }
  if (!final_mask.fits(net)) throw StructuralError("final mask layout does not match the network");
  std::size_t claimed = 0;
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    auto& owner = net.params[i].owner;
    const Bitset& bits = final_mask.params[i];
    for (auto p = bits.find_first(); p != Bitset::npos; p = bits.find_next(p)) {
      if (owner[p] == kFree) {
        owner[p] = task;
        ++claimed;
      }
    }
  }
  return claimed;
}

/// Redraws every free scalar from the initializer. Owned values are not read
/// or written.
template <typename Scalar>
void reinit_unclaimed(Network<Scalar>& net, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : net.params) {
    for (Index i = 0; i < p.size(); ++i) {
      if (!p.frozen(i)) p.values[i] = draw_initial(p, rng);
    }
  }
}

}  // namespace cps
