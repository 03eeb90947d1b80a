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

#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cps/checkpoint.hpp"
#include "cps/config.hpp"
#include "cps/error.hpp"
#include "cps/experiment.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace cps;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kSmall = R"({
  "name": "small",
  "data": {"kind": "blobs", "num_classes": 6, "dim": 16, "separation": 10, "train_per_class": 60, "test_per_class": 20, "seed": 3},
  "task_sizes": [2, 2, 2],
  "orderings": [1, 2],
  "architecture": {"kind": "mlp", "hidden": [24, 24], "batch_norm": false},
  "train": {"epochs": 8, "batch_size": 32},
  "optimizer": {"kind": "adam", "lr": 0.01, "weight_decay": 0.001},
  "prune": {"iterations": 2},
  "selection": {"strategies": ["maxoutput", "is"], "batch_sizes": [1, 20]}
})";

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "cps_experiment_tests" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

ExperimentConfig small_config(const fs::path& out) {
  ExperimentConfig c = parse_config(kSmall);
  c.output_dir = out.string();
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::uint8_t> bytes_of(const fs::path& p) {
  const std::string s = slurp(p);
  return {s.begin(), s.end()};
}

template <typename E>
std::string message_of(auto&& fn) {
  try {
    fn();
  } catch (const E& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("config parsing") {
  const ExperimentConfig c = parse_config(kSmall);
  CHECK(c.task_sizes == std::vector<int>{2, 2, 2});
  CHECK(c.learn.epochs == 8);
  CHECK(c.learn.prune.retrain_epochs == 2);  // a third of the epochs
  CHECK(c.selection.batch_sizes == std::vector<Index>{1, 20});
  CHECK(c.learn.optim.weight_decay == 0.001);
  CHECK(parse_config(config_to_json(c)).learn.optim.lr == c.learn.optim.lr);
  CHECK(config_to_json(parse_config(config_to_json(c))) == config_to_json(c));

  auto with = [](const std::string& patch) {
    json j = json::parse(kSmall);
    j.merge_patch(json::parse(patch));
    return j.dump();
  };
  CHECK(message_of<ConfigError>([&] { parse_config(with(R"({"train": {"epoch": 3}})")); }).find("train.epoch") != std::string::npos);
  CHECK_THROWS_AS(parse_config("{ not json"), ConfigError);
  CHECK_THROWS_AS(parse_config(with(R"({"optimizer": {"kind": "rmsprop"}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(with(R"({"task_sizes": []})")), ConfigError);
  CHECK_THROWS_AS(parse_config(with(R"({"task_sizes": [4, 4]})")), ConfigError);  // more classes than exist
  CHECK_THROWS_AS(parse_config(with(R"({"optimizer": {"lr": -1}})")), ConfigError);
  CHECK_THROWS_AS(parse_config(with(R"({"variant": "thawed"})")), ConfigError);
  CHECK_THROWS_AS(parse_config(with(R"({"architecture": {"kind": "convnet", "channels": [4], "kernel": 2}})")), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/cps.json"), ConfigError);
  CHECK(config_hash(c) != config_hash(parse_config(with(R"({"seed": 99})"))));
}

TEST_CASE("checkpoint round trip") {
  const auto stream = synthetic_blobs(2, 2, 16, 10.0, 30);
  Checkpoint c;
  c.config_json = config_to_json(parse_config(kSmall));
  c.config_hash = 77;
  c.ordering_seed = 4;
  c.class_order = {3, 1, 0, 2};
  c.model = ContinualModel{test::mlp<float>(16, {24}, true, 5), {}};
  for (const auto& t : stream.tasks) learn_task(c.model, t, test::quick_learn(5));
  Eigen::MatrixXd m(2, 2);
  m << 0.5, std::nan(""), 0.25, 1.0;
  c.matrices.push_back({"task_il", m});

  const auto bytes = serialize_checkpoint(c);
  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.class_order == c.class_order);
  CHECK(back.config_hash == 77);
  REQUIRE(find_matrix(back, "task_il") != nullptr);
  CHECK(std::isnan(find_matrix(back, "task_il")->values(0, 1)));
  CHECK(find_matrix(back, "nope") == nullptr);
  for (TaskId t = 1; t <= 2; ++t) {
    const auto& x = stream.tasks[static_cast<std::size_t>(t - 1)].test.x;
    CHECK(infer_subnetwork(back.model, t, x) == infer_subnetwork(c.model, t, x));
    CHECK(back.model.registry.at(t).selection_scores == c.model.registry.at(t).selection_scores);
  }
  for (std::size_t i = 0; i < c.model.network.params.size(); ++i) {
    CHECK(back.model.network.params[i].owner == c.model.network.params[i].owner);
  }

  SUBCASE("truncation names the offset") {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2));
    const std::string msg = message_of<FormatError>([&] { parse_checkpoint(cut); });
    CHECK(msg.find("offset") != std::string::npos);
  }
  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(parse_checkpoint(bad), FormatError);
  }
  SUBCASE("corrupted payload fails the hash") {
    auto bad = bytes;
    bad[bad.size() - 3] ^= 0x40;
    CHECK(message_of<FormatError>([&] { parse_checkpoint(bad); }).find("hash") != std::string::npos);
  }
  SUBCASE("trailing bytes") {
    auto bad = bytes;
    bad.push_back(0);
    CHECK_THROWS_AS(parse_checkpoint(bad), FormatError);
  }
  SUBCASE("file save and load") {
    const fs::path p = fresh_dir("ckpt") / "a.cpns";
    save_checkpoint(p.string(), c);
    CHECK(bytes_of(p) == bytes);
    CHECK_FALSE(fs::exists(p.string() + ".tmp"));
    CHECK_THROWS_AS(load_checkpoint((p.parent_path() / "missing.cpns").string()), InputError);
  }
}

TEST_CASE("mask analysis") {
  ContinualModel m{test::mlp<float>(9, {10}, false, 1), {}};  // one prunable layer, 90 + 10 scalars
  auto part = [&](std::size_t from, std::size_t to) {
    TaskMaskSet s = TaskMaskSet::empty(m.network);
    for (std::size_t i = from; i < to; ++i) s.params[0].set(i);
    return s;
  };
  TaskEntry a;
  a.id = 1;
  a.classes = {0};
  a.mask = part(0, 30);
  m.registry.add(a);

  MaskStats one = analyze_masks(m);
  REQUIRE(one.layers.size() == 1);
  CHECK(one.layers[0].params == 100);
  CHECK(one.layers[0].union_pct == doctest::Approx(30.0));
  CHECK(one.layers[0].intersection_pct == doctest::Approx(30.0));

  TaskEntry b;
  b.id = 2;
  b.classes = {1};
  b.mask = part(30, 50);
  m.registry.add(b);
  const MaskStats two = analyze_masks(m);
  CHECK(two.layers[0].union_pct == doctest::Approx(50.0));
  CHECK(two.layers[0].intersection_pct == 0.0);
  CHECK(two.layers[0].task_pct == std::vector<double>{30.0, 20.0});
  REQUIRE(two.histogram.size() == 3);
  CHECK(two.histogram[0] == doctest::Approx(50.0));
  CHECK(two.histogram[1] == doctest::Approx(50.0));
  CHECK(two.histogram[2] == 0.0);
  const json j = json::parse(mask_stats_json(two));
  CHECK(j.contains("layers"));
}

TEST_CASE("histogram of a trained model sums to 100") {
  const auto stream = synthetic_blobs(3, 2, 16, 10.0, 31);
  ContinualModel m{test::mlp<float>(16, {24, 24}, false, 6), {}};
  for (const auto& t : stream.tasks) learn_task(m, t, test::quick_learn(5));
  const MaskStats s = analyze_masks(m);
  double total = 0;
  for (double h : s.histogram) total += h;
  CHECK(total == doctest::Approx(100.0));
  for (const auto& l : s.layers) CHECK(l.intersection_pct <= l.union_pct);
}

TEST_CASE("runs are reproducible and resumable") {
  const fs::path a = fresh_dir("run_a"), b = fresh_dir("run_b");
  const RunResult ra = run(small_config(a));
  const RunResult rb = run(small_config(b));
  REQUIRE(ra.orderings.size() == 2);
  for (const char* f : {"R_task_il.csv", "R_class_il_is_bs20.csv", "R_class_il_maxoutput_bs1.csv", "history.csv",
                        "selection_is_bs20.csv", "confusion_maxoutput_bs20.csv"}) {
    INFO(f);
    REQUIRE(fs::exists(a / "ordering_1" / f));
    CHECK(slurp(a / "ordering_1" / f) == slurp(b / "ordering_1" / f));
  }
  CHECK(slurp(a / "metrics.json") == slurp(b / "metrics.json"));
  CHECK(bytes_of(a / "ordering_2" / "task_3.cpns").size() > 0);

  // task-IL never forgets
  const json metrics = json::parse(slurp(a / "metrics.json"));
  CHECK(metrics.dump().find("bwt") != std::string::npos);
  for (const auto& r : ra.orderings) CHECK(bwt(r.task_il, 3) == 0.0);

  // resume from the middle of ordering 2 and compare
  const std::string full = slurp(a / "metrics.json");
  RunOptions opt;
  opt.resume = (a / "ordering_2" / "task_1.cpns").string();
  run(small_config(a), opt);
  CHECK(slurp(a / "metrics.json") == full);

  // a checkpoint from a different config is refused
  ExperimentConfig other = small_config(a);
  other.learn.seed = 123;
  CHECK_THROWS_AS(run(other, opt), StateError);

  // re-evaluation and reports
  const Checkpoint ck = load_checkpoint((a / "ordering_1" / "task_3.cpns").string());
  const json ev = json::parse(evaluate_checkpoint(ck, SelectionStrategy::oracle, 20));
  CHECK(ev["class_il_acc_pct"].get<double>() == doctest::Approx(ev["task_il_acc_pct"].get<double>()));
  const std::string rep = report(a.parent_path());
  CHECK(rep.find("small") != std::string::npos);
  CHECK_THROWS_AS(report(fresh_dir("empty")), InputError);
}
