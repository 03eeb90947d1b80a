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
#include <filesystem>
#include <string>
#include <vector>

#include "cps/controller.hpp"
#include "cps/data.hpp"
#include "cps/network.hpp"
#include "cps/selection.hpp"

namespace cps {

struct DataConfig {
  std::string kind = "blobs";  // blobs | idx | cifar100
  // blobs
  BlobSpec blobs;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // cifar100 binary record files
  std::string train_file, test_file;
  bool shuffle_classes = true;
};

struct ArchitectureConfig {
  std::string kind = "mlp";     // mlp | convnet
  std::vector<Index> hidden;    // mlp widths, or fully connected widths after the conv stages
  std::vector<Index> channels;  // convnet stage widths
  Index kernel = 3;
  bool batch_norm = true;
  bool residual = false;        // add a two-conv residual block to every conv stage
  bool pool = true;             // halve the spatial size after every conv stage
};

struct SelectionConfig {
  std::vector<SelectionStrategy> strategies{SelectionStrategy::maxoutput, SelectionStrategy::importance_scores};
  std::vector<Index> batch_sizes{20};
};

struct ExperimentConfig {
  std::string name = "experiment";
  DataConfig data;
  std::vector<int> task_sizes;
  std::vector<std::uint64_t> orderings{1};
  ArchitectureConfig architecture;
  LearnConfig learn;
  SelectionConfig selection;
  std::string output_dir = "runs";

  /// Structural checks; run by parse_config.
  void validate() const;
  /// Data files exist. Call after resolve_paths.
  void validate_files() const;

  /// Resolves relative data paths against `base` (the config file's folder).
  void resolve_paths(const std::filesystem::path& base);
};

/// Parses JSON text. Unknown keys are rejected so that typos surface.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

/// Canonical JSON (sorted keys, no whitespace) used for hashing and checkpoints.
std::string config_to_json(const ExperimentConfig& config);

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t config_hash(const ExperimentConfig& config);

/// Output directory after applying CPS_OUTPUT_ROOT to relative paths.
std::filesystem::path output_root(const ExperimentConfig& config);

Network<float> build_network(const ArchitectureConfig& arch, const Shape& input, std::uint64_t seed);

Dataset load_dataset(const DataConfig& data);

}  // namespace cps
