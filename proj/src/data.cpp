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

#include "cps/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>

#include "cps/error.hpp"
#include "cps/rng.hpp"

namespace cps {
namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const std::string& path) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(path + ": truncated header at byte offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

struct IdxHeader {
  std::vector<Index> dims;
  std::size_t data_offset = 0;
};

IdxHeader parse_idx(const std::vector<std::uint8_t>& bytes, const std::string& path, int min_dims, int max_dims) {
  const std::uint32_t magic = read_be32(bytes, 0, path);
  const int ndims = static_cast<int>(magic & 0xff);
  if ((magic & 0xffffff00u) != 0x00000800u || ndims < min_dims || ndims > max_dims) {
    std::ostringstream os;
    os << path << ": bad IDX magic 0x" << std::hex << std::setw(8) << std::setfill('0') << magic
       << " at byte offset 0, expected 0x" << std::setw(8) << (0x00000800u | static_cast<std::uint32_t>(min_dims));
    if (max_dims > min_dims) os << " to 0x" << std::setw(8) << (0x00000800u | static_cast<std::uint32_t>(max_dims));
    throw FormatError(os.str());
  }
  IdxHeader h;
  for (int d = 0; d < ndims; ++d) h.dims.push_back(static_cast<Index>(read_be32(bytes, 4 + 4 * static_cast<std::size_t>(d), path)));
  h.data_offset = 4 + 4 * static_cast<std::size_t>(ndims);
  std::size_t count = 1;
  for (Index d : h.dims) count *= static_cast<std::size_t>(d);
  if (bytes.size() < h.data_offset + count) {
    throw FormatError(path + ": truncated payload at byte offset " + std::to_string(bytes.size()) + ", expected " +
                      std::to_string(h.data_offset + count) + " bytes");
  }
  return h;
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

std::vector<int> TaskSplit::local_labels(const LabeledSet& set) const {
  std::vector<int> out;
  out.reserve(set.labels.size());
  for (int y : set.labels) {
    const auto it = std::find(classes.begin(), classes.end(), y);
    if (it == classes.end()) throw InputError("label " + std::to_string(y) + " does not belong to task " + std::to_string(id));
    out.push_back(static_cast<int>(it - classes.begin()));
  }
  return out;
}

ClassOrdering ClassOrdering::identity(int num_classes) {
  ClassOrdering o;
  o.classes.resize(static_cast<std::size_t>(num_classes));
  std::iota(o.classes.begin(), o.classes.end(), 0);
  return o;
}

ClassOrdering ClassOrdering::shuffled(int num_classes, std::uint64_t seed) {
  ClassOrdering o = identity(num_classes);
  o.seed = seed;
  Rng rng(seed);
  rng.shuffle(o.classes);
  return o;
}

void ClassOrdering::validate() const {
  std::vector<int> sorted = classes;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != static_cast<int>(i)) throw InputError("class ordering is not a permutation");
  }
}

Tensor<float> load_idx_images(const std::string& path) {
  const auto bytes = read_file(path);
  const IdxHeader h = parse_idx(bytes, path, 2, 4);
  std::vector<Index> dims = h.dims;
  if (dims.size() == 3) dims.insert(dims.begin() + 1, 1);
  Tensor<float> x{Shape(dims)};
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(bytes[h.data_offset + static_cast<std::size_t>(i)]) / 255.0f;
  return x;
}

std::vector<int> load_idx_labels(const std::string& path) {
  const auto bytes = read_file(path);
  const IdxHeader h = parse_idx(bytes, path, 1, 1);
  std::vector<int> labels(static_cast<std::size_t>(h.dims[0]));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = bytes[h.data_offset + i];
  return labels;
}

LabeledSet load_idx(const std::string& images_path, const std::string& labels_path) {
  LabeledSet s{load_idx_images(images_path), load_idx_labels(labels_path)};
  if (s.x.batch() != s.size()) {
    throw FormatError(images_path + " holds " + std::to_string(s.x.batch()) + " images but " + labels_path + " holds " +
                      std::to_string(s.size()) + " labels");
  }
  return s;
}

void save_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels, std::span<const std::int32_t> dims) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  write_be32(out, 0x00000800u | static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) write_be32(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void save_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  write_be32(out, 0x00000801u);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

LabeledSet load_cifar_binary(const std::string& path) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  constexpr std::size_t kRecord = 2 + kPixels;
  const auto bytes = read_file(path);
  if (bytes.size() % kRecord != 0) {
    throw FormatError(path + ": size " + std::to_string(bytes.size()) + " is not a whole number of " +
                      std::to_string(kRecord) + "-byte records; last record starts at byte offset " +
                      std::to_string(bytes.size() / kRecord * kRecord));
  }
  const auto n = static_cast<Index>(bytes.size() / kRecord);
  LabeledSet s;
  s.x = Tensor<float>(Shape{n, 3, 32, 32});
  s.labels.resize(static_cast<std::size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * kRecord;
    s.labels[static_cast<std::size_t>(r)] = bytes[base + 1];
    for (std::size_t p = 0; p < kPixels; ++p) {
      s.x[r * static_cast<Index>(kPixels) + static_cast<Index>(p)] = static_cast<float>(bytes[base + 2 + p]) / 255.0f;
    }
  }
  return s;
}

TaskStream make_task_stream(const Dataset& data, const ClassOrdering& ordering, std::span<const int> sizes) {
  ordering.validate();
  std::size_t total = 0;
  for (int s : sizes) {
    if (s < 1) throw InputError("task sizes must be positive");
    total += static_cast<std::size_t>(s);
  }
  if (total > ordering.classes.size()) {
    throw InputError("task sizes request " + std::to_string(total) + " classes but only " +
                     std::to_string(ordering.classes.size()) + " exist");
  }

  auto select = [](const LabeledSet& set, const std::set<int>& classes) {
    std::vector<Index> idx;
    for (std::size_t i = 0; i < set.labels.size(); ++i) {
      if (classes.count(set.labels[i])) idx.push_back(static_cast<Index>(i));
    }
    return set.subset(idx);
  };

  TaskStream stream;
  std::size_t offset = 0;
  for (std::size_t t = 0; t < sizes.size(); ++t) {
    TaskSplit task;
    task.id = static_cast<TaskId>(t + 1);
    task.classes.assign(ordering.classes.begin() + static_cast<std::ptrdiff_t>(offset),
                        ordering.classes.begin() + static_cast<std::ptrdiff_t>(offset + static_cast<std::size_t>(sizes[t])));
    offset += static_cast<std::size_t>(sizes[t]);
    const std::set<int> members(task.classes.begin(), task.classes.end());
    task.train = select(data.train, members);
    task.test = select(data.test, members);
    stream.tasks.push_back(std::move(task));
  }
  return stream;
}

Dataset synthetic_blob_dataset(const BlobSpec& spec) {
  if (!(spec.separation > 0.0)) throw InputError("blob separation must be positive");
  if (spec.num_classes < 1 || spec.dim < 1) throw InputError("blobs need at least one class and one dimension");
  Shape sample = spec.sample_shape.empty() ? Shape{spec.dim} : Shape(spec.sample_shape);
  if (sample.size() != spec.dim) throw InputError("blob sample shape does not match dim");

  Rng rng(spec.seed);
  const auto k = static_cast<std::size_t>(spec.num_classes);
  const auto d = static_cast<Index>(spec.dim);
  // Gaussian means scaled so the typical pairwise distance is 1.5x the
  // separation; resample any mean that lands too close to an earlier one.
  double scale = 1.5 * spec.separation / std::sqrt(2.0 * spec.dim);
  std::vector<Eigen::VectorXd> means;
  int attempts = 0;
  while (means.size() < k) {
    Eigen::VectorXd m(d);
    for (Index i = 0; i < d; ++i) m[i] = scale * rng.normal();
    bool ok = true;
    for (const auto& other : means) ok = ok && (m - other).norm() >= spec.separation;
    if (ok) {
      means.push_back(std::move(m));
      attempts = 0;
    } else if (++attempts > 200) {
      scale *= 1.1;
      attempts = 0;
    }
  }

  auto draw = [&](int per_class) {
    LabeledSet s;
    const Index n = static_cast<Index>(per_class) * static_cast<Index>(k);
    s.x = Tensor<float>(Shape::batched(n, sample));
    Index r = 0;
    for (std::size_t c = 0; c < k; ++c) {
      for (int j = 0; j < per_class; ++j, ++r) {
        for (Index i = 0; i < d; ++i) s.x[r * d + i] = static_cast<float>(means[c][i] + rng.normal());
        s.labels.push_back(static_cast<int>(c));
      }
    }
    return s;
  };

  Dataset data;
  data.num_classes = spec.num_classes;
  data.train = draw(spec.train_per_class);
  data.test = draw(spec.test_per_class);
  return data;
}

TaskStream synthetic_blobs(int n_tasks, int classes_per_task, int dim, double separation, std::uint64_t seed) {
  BlobSpec spec;
  spec.num_classes = n_tasks * classes_per_task;
  spec.dim = dim;
  spec.separation = separation;
  spec.seed = seed;
  const Dataset data = synthetic_blob_dataset(spec);
  const std::vector<int> sizes(static_cast<std::size_t>(n_tasks), classes_per_task);
  return make_task_stream(data, ClassOrdering::identity(spec.num_classes), sizes);
}

}  // namespace cps
