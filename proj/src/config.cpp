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

#include "cps/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "cps/error.hpp"
#include "cps/rng.hpp"

namespace cps {
namespace {

using nlohmann::json;

// Reads keys from one JSON object and rejects any it did not ask for.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + where_ + "." + it.key());
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_data(const json& j, DataConfig& d) {
  Reader r(j, "data");
  r.get("kind", d.kind);
  r.get("shuffle_classes", d.shuffle_classes);
  r.get("num_classes", d.blobs.num_classes);
  r.get("dim", d.blobs.dim);
  r.get("separation", d.blobs.separation);
  r.get("train_per_class", d.blobs.train_per_class);
  r.get("test_per_class", d.blobs.test_per_class);
  r.get("seed", d.blobs.seed);
  r.get("sample_shape", d.blobs.sample_shape);
  r.get("train_images", d.train_images);
  r.get("train_labels", d.train_labels);
  r.get("test_images", d.test_images);
  r.get("test_labels", d.test_labels);
  r.get("train_file", d.train_file);
  r.get("test_file", d.test_file);
  r.finish();
}

void read_architecture(const json& j, ArchitectureConfig& a) {
  Reader r(j, "architecture");
  r.get("kind", a.kind);
  r.get("hidden", a.hidden);
  r.get("channels", a.channels);
  r.get("kernel", a.kernel);
  r.get("batch_norm", a.batch_norm);
  r.get("residual", a.residual);
  r.get("pool", a.pool);
  r.finish();
}

void read_optimizer(const json& j, OptimSpec& o) {
  Reader r(j, "optimizer");
  std::string kind = o.kind == OptimizerKind::adam ? "adam" : "sgd";
  r.get("kind", kind);
  if (kind == "adam") {
    o.kind = OptimizerKind::adam;
  } else if (kind == "sgd") {
    o.kind = OptimizerKind::sgd;
  } else {
    throw ConfigError("optimizer.kind must be adam or sgd, got '" + kind + "'");
  }
  r.get("lr", o.lr);
  r.get("weight_decay", o.weight_decay);
  r.get("momentum", o.momentum);
  r.get("beta1", o.beta1);
  r.get("beta2", o.beta2);
  r.get("epsilon", o.epsilon);
  std::vector<std::pair<int, double>> schedule;
  r.get("schedule", schedule);
  if (r.has("schedule")) {
    o.schedule.clear();
    for (const auto& [epoch, divisor] : schedule) o.schedule.push_back(LrStep{epoch, divisor});
  }
  r.finish();
}

void read_prune(const json& j, PruneConfig& p, bool& retrain_given) {
  Reader r(j, "prune");
  r.get("alpha_fc", p.alpha_fc);
  r.get("alpha_conv", p.alpha_conv);
  r.get("iterations", p.iterations);
  retrain_given = r.has("retrain_epochs");
  r.get("retrain_epochs", p.retrain_epochs);
  r.finish();
}

void read_selection(const json& j, SelectionConfig& s) {
  Reader r(j, "selection");
  std::vector<std::string> names;
  r.get("strategies", names);
  if (r.has("strategies")) {
    s.strategies.clear();
    for (const auto& n : names) s.strategies.push_back(selection_strategy_from_string(n));
  }
  r.get("batch_sizes", s.batch_sizes);
  r.finish();
}

void read_train(const json& j, LearnConfig& l) {
  Reader r(j, "train");
  r.get("epochs", l.epochs);
  r.get("batch_size", l.batch_size);
  r.get("selection_sample", l.selection_sample);
  r.finish();
}

json to_json(const ExperimentConfig& c) {
  const auto& d = c.data;
  const auto& a = c.architecture;
  const auto& l = c.learn;
  json schedule = json::array();
  for (const auto& s : l.optim.schedule) schedule.push_back({s.epoch, s.divisor});
  std::vector<std::string> strategies;
  for (auto s : c.selection.strategies) strategies.push_back(to_string(s));
  return json{
      {"name", c.name},
      {"data",
       {{"kind", d.kind},
        {"shuffle_classes", d.shuffle_classes},
        {"num_classes", d.blobs.num_classes},
        {"dim", d.blobs.dim},
        {"separation", d.blobs.separation},
        {"train_per_class", d.blobs.train_per_class},
        {"test_per_class", d.blobs.test_per_class},
        {"seed", d.blobs.seed},
        {"sample_shape", d.blobs.sample_shape},
        {"train_images", d.train_images},
        {"train_labels", d.train_labels},
        {"test_images", d.test_images},
        {"test_labels", d.test_labels},
        {"train_file", d.train_file},
        {"test_file", d.test_file}}},
      {"task_sizes", c.task_sizes},
      {"orderings", c.orderings},
      {"architecture",
       {{"kind", a.kind},
        {"hidden", a.hidden},
        {"channels", a.channels},
        {"kernel", a.kernel},
        {"batch_norm", a.batch_norm},
        {"residual", a.residual},
        {"pool", a.pool}}},
      {"train", {{"epochs", l.epochs}, {"batch_size", l.batch_size}, {"selection_sample", l.selection_sample}}},
      {"optimizer",
       {{"kind", l.optim.kind == OptimizerKind::adam ? "adam" : "sgd"},
        {"lr", l.optim.lr},
        {"weight_decay", l.optim.weight_decay},
        {"momentum", l.optim.momentum},
        {"beta1", l.optim.beta1},
        {"beta2", l.optim.beta2},
        {"epsilon", l.optim.epsilon},
        {"schedule", schedule}}},
      {"prune",
       {{"alpha_fc", l.prune.alpha_fc},
        {"alpha_conv", l.prune.alpha_conv},
        {"iterations", l.prune.iterations},
        {"retrain_epochs", l.prune.retrain_epochs}}},
      {"selection", {{"strategies", strategies}, {"batch_sizes", c.selection.batch_sizes}}},
      {"variant", l.variant == Variant::frozen ? "frozen" : "standard"},
      {"reinit", l.reinit == ReinitMode::reinit ? "reinit" : "keep"},
      {"seed", l.seed},
      {"output_dir", c.output_dir},
  };
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("data.") + what + " is required");
  if (!std::filesystem::is_regular_file(path)) throw ConfigError(std::string("data.") + what + " not found: " + path);
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(j, "config");
  r.get("name", c.name);
  if (const json* d = r.child("data")) read_data(*d, c.data);
  r.get("task_sizes", c.task_sizes);
  r.get("orderings", c.orderings);
  if (const json* a = r.child("architecture")) read_architecture(*a, c.architecture);
  if (const json* t = r.child("train")) read_train(*t, c.learn);
  if (const json* o = r.child("optimizer")) read_optimizer(*o, c.learn.optim);
  bool retrain_given = false;
  if (const json* p = r.child("prune")) read_prune(*p, c.learn.prune, retrain_given);
  if (!retrain_given) c.learn.prune.retrain_epochs = std::max(1, c.learn.epochs / 3);
  if (const json* s = r.child("selection")) read_selection(*s, c.selection);
  std::string variant = "standard", reinit = "reinit";
  r.get("variant", variant);
  r.get("reinit", reinit);
  if (variant == "standard") {
    c.learn.variant = Variant::standard;
  } else if (variant == "frozen") {
    c.learn.variant = Variant::frozen;
  } else {
    throw ConfigError("variant must be standard or frozen, got '" + variant + "'");
  }
  if (reinit == "reinit") {
    c.learn.reinit = ReinitMode::reinit;
  } else if (reinit == "keep") {
    c.learn.reinit = ReinitMode::keep;
  } else {
    throw ConfigError("reinit must be reinit or keep, got '" + reinit + "'");
  }
  r.get("seed", c.learn.seed);
  r.get("output_dir", c.output_dir);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig c = parse_config(ss.str());
  c.resolve_paths(std::filesystem::absolute(path).parent_path());
  return c;
}

void ExperimentConfig::resolve_paths(const std::filesystem::path& base) {
  for (std::string* p : {&data.train_images, &data.train_labels, &data.test_images, &data.test_labels,
                         &data.train_file, &data.test_file}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
}

void ExperimentConfig::validate() const {
  learn.validate();
  if (task_sizes.empty()) throw ConfigError("task_sizes must list at least one task");
  for (int s : task_sizes) {
    if (s < 1) throw ConfigError("every task needs at least one class");
  }
  if (orderings.empty()) throw ConfigError("orderings must list at least one seed");
  if (std::set<std::uint64_t>(orderings.begin(), orderings.end()).size() != orderings.size()) {
    throw ConfigError("ordering seeds must be distinct");
  }
  if (selection.strategies.empty()) throw ConfigError("selection.strategies is empty");
  if (selection.batch_sizes.empty()) throw ConfigError("selection.batch_sizes is empty");
  for (Index s : selection.batch_sizes) {
    if (s < 1) throw ConfigError("selection batch sizes must be at least 1");
  }
  if (architecture.kind == "mlp") {
    if (!architecture.channels.empty()) throw ConfigError("an mlp has no conv channels");
  } else if (architecture.kind == "convnet") {
    if (architecture.channels.empty()) throw ConfigError("a convnet needs at least one conv stage");
    if (architecture.kernel < 1 || architecture.kernel % 2 == 0) throw ConfigError("conv kernel must be odd");
  } else {
    throw ConfigError("architecture.kind must be mlp or convnet, got '" + architecture.kind + "'");
  }
  for (Index w : architecture.hidden) {
    if (w < 1) throw ConfigError("hidden widths must be positive");
  }
  for (Index w : architecture.channels) {
    if (w < 1) throw ConfigError("conv channels must be positive");
  }
  if (data.kind == "blobs") {
    if (data.blobs.num_classes < 1 || data.blobs.dim < 1) throw ConfigError("blobs need classes and a dimension");
    long total = 0;
    for (int s : task_sizes) total += s;
    if (total > data.blobs.num_classes) {
      throw ConfigError("task_sizes ask for " + std::to_string(total) + " classes but the blobs have " +
                        std::to_string(data.blobs.num_classes));
    }
  } else if (data.kind != "idx" && data.kind != "cifar100") {
    throw ConfigError("data.kind must be blobs, idx or cifar100, got '" + data.kind + "'");
  }
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
}

void ExperimentConfig::validate_files() const {
  if (data.kind == "idx") {
    require_file(data.train_images, "train_images");
    require_file(data.train_labels, "train_labels");
    require_file(data.test_images, "test_images");
    require_file(data.test_labels, "test_labels");
  } else if (data.kind == "cifar100") {
    require_file(data.train_file, "train_file");
    require_file(data.test_file, "test_file");
  }
}

std::string config_to_json(const ExperimentConfig& config) { return to_json(config).dump(); }

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  const std::string text = config_to_json(config);
  return fnv1a64(text.data(), text.size());
}

std::filesystem::path output_root(const ExperimentConfig& config) {
  std::filesystem::path out(config.output_dir);
  if (out.is_relative()) {
    if (const char* root = std::getenv("CPS_OUTPUT_ROOT"); root != nullptr && *root != '\0') out = std::filesystem::path(root) / out;
  }
  return out;
}

Network<float> build_network(const ArchitectureConfig& arch, const Shape& input, std::uint64_t seed) {
  NetworkBuilder<float> b(input);
  if (arch.kind == "convnet") {
    if (input.rank() != 3) throw ConfigError("a convnet needs C x H x W samples, got " + input.str());
    const Index pad = arch.kernel / 2;
    for (Index c : arch.channels) {
      b.conv2d(c, arch.kernel, 1, pad);
      if (arch.batch_norm) b.batch_norm();
      b.relu();
      if (arch.residual) {
        const Index skip = b.point();
        b.conv2d(c, arch.kernel, 1, pad);
        if (arch.batch_norm) b.batch_norm();
        b.relu();
        b.conv2d(c, arch.kernel, 1, pad);
        if (arch.batch_norm) b.batch_norm();
        b.residual_add(skip);
        b.relu();
      }
      const Shape& s = b.current();
      if (arch.pool && s[1] % 2 == 0 && s[2] % 2 == 0 && s[1] > 1) b.avg_pool(2);
    }
    b.avg_pool(0);
  }
  if (b.current().rank() != 1) b.flatten();
  for (Index w : arch.hidden) {
    b.linear(w);
    if (arch.batch_norm) b.batch_norm();
    b.relu();
  }
  Rng rng(seed);
  return b.build(rng);
}

Dataset load_dataset(const DataConfig& data) {
  if (data.kind == "blobs") return synthetic_blob_dataset(data.blobs);
  Dataset d;
  if (data.kind == "idx") {
    d.train = load_idx(data.train_images, data.train_labels);
    d.test = load_idx(data.test_images, data.test_labels);
  } else if (data.kind == "cifar100") {
    d.train = load_cifar_binary(data.train_file);
    d.test = load_cifar_binary(data.test_file);
  } else {
    throw ConfigError("unknown data kind '" + data.kind + "'");
  }
  int top = -1;
  for (int l : d.train.labels) top = std::max(top, l);
  for (int l : d.test.labels) top = std::max(top, l);
  d.num_classes = top + 1;
  return d;
}

}  // namespace cps
