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
#include <span>
#include <string>
#include <vector>

#include "cps/controller.hpp"

namespace cps {

inline constexpr char kCheckpointMagic[5] = {'C', 'P', 'N', 'S', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedMatrix {
  std::string name;
  Eigen::MatrixXd values;  // NaN marks unset entries
};

/// State after some number of learned tasks within one class ordering.
struct Checkpoint {
  std::string config_json;  // canonical experiment config
  std::uint64_t config_hash = 0;
  std::uint64_t ordering_seed = 0;
  std::vector<int> class_order;
  ContinualModel model;
  std::vector<NamedMatrix> matrices;  // evaluation results so far
};

/// Layout: magic, u32 version, u64 manifest length, JSON manifest, u64
/// payload length, payload. All numbers little-endian. The manifest records
/// the FNV-1a hash of the payload.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

const NamedMatrix* find_matrix(const Checkpoint& c, const std::string& name);

}  // namespace cps
