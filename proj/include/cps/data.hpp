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
#include <span>
#include <string>
#include <vector>

#include "cps/network.hpp"
#include "cps/tensor.hpp"

namespace cps {

/// Samples (channel-first 32-bit reals in [0, 1] for images) with integer
/// class labels.
struct LabeledSet {
  Tensor<float> x;
  std::vector<int> labels;

  Index size() const noexcept { return static_cast<Index>(labels.size()); }

  template <typename Indices>
  LabeledSet subset(const Indices& indices) const {
    LabeledSet s;
    s.x = x.gather(indices);
    for (auto i : indices) s.labels.push_back(labels[static_cast<std::size_t>(i)]);
    return s;
  }
};

struct Dataset {
  LabeledSet train;
  LabeledSet test;
  int num_classes = 0;
};

/// One incremental task: a disjoint class subset and the matching samples
/// (labels stay global class ids).
struct TaskSplit {
  TaskId id = kFree;
  std::vector<int> classes;
  LabeledSet train;
  LabeledSet test;

  /// Position of each label within `classes`.
  std::vector<int> local_labels(const LabeledSet& set) const;
};

struct TaskStream {
  std::vector<TaskSplit> tasks;
};

struct ClassOrdering {
  std::vector<int> classes;
  std::uint64_t seed = 0;

  static ClassOrdering identity(int num_classes);
  /// Fisher-Yates over mt19937_64(seed); reproducible within this library,
  /// not against other frameworks' orderings.
  static ClassOrdering shuffled(int num_classes, std::uint64_t seed);
  void validate() const;
};

/// IDX (big-endian) files: unsigned-byte images of 2 to 4 dimensions and a
/// 1-dimensional label file. Images become N x 1 x H x W (3 dims) or N x C x
/// H x W (4 dims), scaled by 1/255.
Tensor<float> load_idx_images(const std::string& path);
std::vector<int> load_idx_labels(const std::string& path);
LabeledSet load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes the unsigned-byte IDX encoding; used for fixtures and tooling.
void save_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels, std::span<const std::int32_t> dims);
void save_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

/// CIFAR-100 binary records: coarse label byte, fine label byte, 3072 pixel
/// bytes (R, G, B planes of 32 x 32). Returns fine labels.
LabeledSet load_cifar_binary(const std::string& path);

/// Consecutive slices of `ordering` become tasks of the given sizes.
TaskStream make_task_stream(const Dataset& data, const ClassOrdering& ordering, std::span<const int> sizes);

struct BlobSpec {
  int num_classes = 10;
  int dim = 16;
  double separation = 10.0;  // minimum pairwise mean distance, in units of sigma = 1
  int train_per_class = 100;
  int test_per_class = 50;
  std::uint64_t seed = 0;
  std::vector<Index> sample_shape;  // optional reshaping of each sample, product = dim
};

/// Isotropic unit-variance Gaussian clusters.
Dataset synthetic_blob_dataset(const BlobSpec& spec);

/// `n_tasks` equal tasks of `classes_per_task` blob classes in identity order.
TaskStream synthetic_blobs(int n_tasks, int classes_per_task, int dim, double separation, std::uint64_t seed);

}  // namespace cps
