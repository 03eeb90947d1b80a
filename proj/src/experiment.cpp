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

#include "cps/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "cps/error.hpp"
#include "cps/rng.hpp"
#include "cps/selection.hpp"

namespace cps {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

enum SeedTag : std::uint64_t { kNetInit = 0x6e6574, kEval = 0x6576616c };

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr int kHistoryCols = 6;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

std::string matrix_csv(const Eigen::MatrixXd& m, const char* row_label, double scale) {
  std::ostringstream out;
  out << row_label;
  for (Index j = 0; j < m.cols(); ++j) out << ",task" << j + 1;
  out << '\n' << std::setprecision(17);
  for (Index i = 0; i < m.rows(); ++i) {
    out << i + 1;
    for (Index j = 0; j < m.cols(); ++j) {
      out << ',';
      if (!std::isnan(m(i, j))) out << m(i, j) * scale;
    }
    out << '\n';
  }
  return out.str();
}

std::string confusion_csv(const Eigen::MatrixXi& m) {
  std::ostringstream out;
  out << "true";
  for (Index j = 0; j < m.cols(); ++j) out << ",chose" << j + 1;
  out << '\n';
  for (Index i = 0; i < m.rows(); ++i) {
    out << i + 1;
    for (Index j = 0; j < m.cols(); ++j) out << ',' << m(i, j);
    out << '\n';
  }
  return out.str();
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream out;
  out << "task,free_params,newly_frozen,min_layer_free_pct,task_il_diag_pct,task_il_acc_pct\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.task << ',' << r.free_params << ',' << r.newly_frozen << ',' << r.min_layer_free * 100.0 << ','
        << r.task_il_diagonal * 100.0 << ',' << r.task_il_acc * 100.0 << '\n';
  }
  return out.str();
}

Eigen::MatrixXd from_eval(const EvalMatrix& r) { return r.values(); }

EvalMatrix to_eval(const Eigen::MatrixXd& m) {
  EvalMatrix r(m.rows());
  for (Index a = 0; a < m.rows(); ++a) {
    for (Index t = 0; t <= a && t < m.cols(); ++t) {
      if (!std::isnan(m(a, t))) r.set(a + 1, t + 1, m(a, t));
    }
  }
  return r;
}

std::vector<NamedMatrix> to_matrices(const OrderingResult& r, Index tasks) {
  std::vector<NamedMatrix> out;
  out.push_back({"task_il", from_eval(r.task_il)});
  for (const auto& [key, m] : r.class_il) out.push_back({"class_il/" + key, from_eval(m)});
  for (const auto& [key, m] : r.selection) out.push_back({"selection/" + key, m});
  for (const auto& [key, m] : r.confusion) out.push_back({"confusion/" + key, m.cast<double>()});
  Eigen::MatrixXd h = Eigen::MatrixXd::Constant(tasks, kHistoryCols, kNaN);
  for (const auto& row : r.history) {
    h.row(row.task - 1) << row.task, row.free_params, row.newly_frozen, row.min_layer_free, row.task_il_diagonal,
        row.task_il_acc;
  }
  out.push_back({"history", h});
  return out;
}

OrderingResult from_checkpoint(const Checkpoint& c) {
  OrderingResult r;
  r.ordering_seed = c.ordering_seed;
  r.completed = static_cast<int>(c.model.registry.size());
  for (const auto& m : c.matrices) {
    if (m.name == "task_il") {
      r.task_il = to_eval(m.values);
    } else if (m.name.rfind("class_il/", 0) == 0) {
      r.class_il[m.name.substr(9)] = to_eval(m.values);
    } else if (m.name.rfind("selection/", 0) == 0) {
      r.selection[m.name.substr(10)] = m.values;
    } else if (m.name.rfind("confusion/", 0) == 0) {
      r.confusion[m.name.substr(10)] = m.values.cast<int>();
    } else if (m.name == "history") {
      for (Index i = 0; i < m.values.rows(); ++i) {
        if (std::isnan(m.values(i, 0))) continue;
        const auto v = m.values.row(i);
        r.history.push_back({static_cast<int>(v[0]), v[1], v[2], v[3], v[4], v[5]});
      }
    }
  }
  return r;
}

OrderingResult fresh_result(const ExperimentConfig& config, std::uint64_t seed) {
  const auto tasks = static_cast<Index>(config.task_sizes.size());
  OrderingResult r;
  r.ordering_seed = seed;
  r.task_il = EvalMatrix(tasks);
  for (auto s : config.selection.strategies) {
    for (Index bs : config.selection.batch_sizes) {
      r.class_il[selection_key(s, bs)] = EvalMatrix(tasks);
      r.selection[selection_key(s, bs)] = Eigen::MatrixXd::Constant(tasks, tasks, kNaN);
    }
  }
  return r;
}

void evaluate_step(const ContinualModel& model, const TaskStream& stream, int step, const ExperimentConfig& config,
                   std::uint64_t seed, OrderingResult& r) {
  for (int t = 1; t <= step; ++t) {
    r.task_il.set(step, t, task_il_accuracy(model, t, stream.tasks[static_cast<std::size_t>(t - 1)].test));
  }
  const std::span<const TaskSplit> seen(stream.tasks.data(), static_cast<std::size_t>(step));
  for (Index bs : config.selection.batch_sizes) {
    const std::uint64_t eval_seed = derive_seed(seed, {kEval, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(bs)});
    for (auto s : config.selection.strategies) {
      const std::string key = selection_key(s, bs);
      const StreamResult sr = classify_stream(model, seen, bs, s, eval_seed);
      for (int t = 1; t <= step; ++t) {
        r.class_il[key].set(step, t, sr.class_il_accuracy[static_cast<std::size_t>(t - 1)]);
        r.selection[key](step - 1, t - 1) = sr.selection_accuracy[static_cast<std::size_t>(t - 1)];
      }
      r.confusion[key] = sr.confusion;
    }
  }
  const Network<float>& net = model.network;
  r.history.push_back({step, static_cast<double>(net.free_count()),
                       static_cast<double>(model.registry.at(step).newly_frozen), min_layer_free_fraction(net),
                       r.task_il.at(step, step), acc(r.task_il, step)});
  r.completed = step;
}

void write_ordering(const fs::path& dir, const OrderingResult& r) {
  write_text(dir / "R_task_il.csv", r.task_il.to_csv(100.0));
  for (const auto& [key, m] : r.class_il) write_text(dir / ("R_class_il_" + key + ".csv"), m.to_csv(100.0));
  for (const auto& [key, m] : r.selection) write_text(dir / ("selection_" + key + ".csv"), matrix_csv(m, "after", 100.0));
  for (const auto& [key, m] : r.confusion) write_text(dir / ("confusion_" + key + ".csv"), confusion_csv(m));
  write_text(dir / "history.csv", history_csv(r.history));
}

json summary_json(const std::vector<double>& values) {
  std::vector<double> pct;
  for (double v : values) pct.push_back(v * 100.0);
  const Summary s = summarize(pct);
  return json{{"mean", s.mean}, {"std", s.std}, {"values", pct}};
}

json metric_block(const std::vector<const EvalMatrix*>& rs, Index tasks) {
  std::vector<double> a, b, i;
  for (const EvalMatrix* r : rs) {
    a.push_back(acc(*r, tasks));
    i.push_back(aia(*r, tasks));
    if (tasks >= 2) b.push_back(bwt(*r, tasks));
  }
  json out{{"acc", summary_json(a)}, {"aia", summary_json(i)}};
  out["bwt"] = tasks >= 2 ? summary_json(b) : json(nullptr);
  return out;
}

std::string metrics_json(const ExperimentConfig& config, const std::vector<OrderingResult>& results) {
  const auto tasks = static_cast<Index>(config.task_sizes.size());
  std::vector<const EvalMatrix*> task_il;
  for (const auto& r : results) task_il.push_back(&r.task_il);
  json class_il = json::object(), selection = json::object();
  for (const auto& [key, unused] : results.front().class_il) {
    std::vector<const EvalMatrix*> rs;
    std::vector<double> sel;
    for (const auto& r : results) {
      rs.push_back(&r.class_il.at(key));
      sel.push_back(r.selection.at(key).row(tasks - 1).mean());
    }
    class_il[key] = metric_block(rs, tasks);
    selection[key] = summary_json(sel);
  }
  std::vector<std::uint64_t> seeds;
  for (const auto& r : results) seeds.push_back(r.ordering_seed);
  const json out{{"name", config.name},
                 {"tasks", tasks},
                 {"orderings", seeds},
                 {"units", "percent"},
                 {"task_il", metric_block(task_il, tasks)},
                 {"class_il", class_il},
                 {"selection_accuracy_final_step", selection}};
  return out.dump(2) + "\n";
}

void log_line(const RunOptions& o, const std::string& s) {
  if (o.log != nullptr) *o.log << s << std::endl;
}

std::string pct(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << v * 100.0;
  return s.str();
}

}  // namespace

std::string selection_key(SelectionStrategy s, Index batch_size) {
  return to_string(s) + "_bs" + std::to_string(batch_size);
}

TaskStream build_stream(const ExperimentConfig& config, const Dataset& data, std::uint64_t ordering_seed) {
  const ClassOrdering ordering = config.data.shuffle_classes ? ClassOrdering::shuffled(data.num_classes, ordering_seed)
                                                             : ClassOrdering::identity(data.num_classes);
  return make_task_stream(data, ordering, config.task_sizes);
}

double min_layer_free_fraction(const Network<float>& net) {
  double lowest = 1.0;
  for (const auto& l : net.layers) {
    if (!l.prunable()) continue;
    const auto& p = net.params[static_cast<std::size_t>(l.weight)];
    lowest = std::min(lowest, static_cast<double>(p.free_count()) / static_cast<double>(p.size()));
  }
  return lowest;
}

RunResult run(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  config.validate_files();
  const std::uint64_t hash = config_hash(config);
  const std::string config_text = config_to_json(config);
  const auto tasks = static_cast<int>(config.task_sizes.size());

  std::optional<Checkpoint> resume;
  if (options.resume) {
    resume = load_checkpoint(*options.resume);
    if (resume->config_hash != hash) throw StateError("checkpoint " + *options.resume + " was written by a different config");
    if (std::find(config.orderings.begin(), config.orderings.end(), resume->ordering_seed) == config.orderings.end()) {
      throw StateError("checkpoint ordering seed is not part of this config");
    }
  }

  RunResult result;
  result.directory = output_root(config);
  fs::create_directories(result.directory);
  write_text(result.directory / "config.json", json::parse(config_text).dump(2) + "\n");
  const Dataset data = load_dataset(config.data);

  for (std::uint64_t ordering_seed : config.orderings) {
    const fs::path dir = result.directory / ("ordering_" + std::to_string(ordering_seed));
    fs::create_directories(dir);
    const TaskStream stream = build_stream(config, data, ordering_seed);
    std::vector<int> class_order;
    for (const auto& t : stream.tasks) class_order.insert(class_order.end(), t.classes.begin(), t.classes.end());

    LearnConfig learn_config = config.learn;
    learn_config.seed = derive_seed(config.learn.seed, {ordering_seed});

    ContinualModel model;
    OrderingResult r = fresh_result(config, ordering_seed);
    if (resume && resume->ordering_seed == ordering_seed) {
      if (resume->class_order != class_order) throw StateError("checkpoint class order differs from the configured one");
      model = resume->model;
      r = from_checkpoint(*resume);
      log_line(options, "ordering " + std::to_string(ordering_seed) + ": resuming after task " + std::to_string(r.completed));
    } else {
      model.network = build_network(config.architecture, data.train.x.shape().sample(), derive_seed(learn_config.seed, {kNetInit}));
    }

    for (int step = r.completed + 1; step <= tasks; ++step) {
      try {
        learn(model, stream.tasks[static_cast<std::size_t>(step - 1)], learn_config);
        evaluate_step(model, stream, step, config, learn_config.seed, r);
      } catch (const Error& e) {
        const json failure{{"ordering", ordering_seed}, {"task", step}, {"kind", to_string(e.kind())}, {"message", e.what()}};
        write_text(dir / "failure.json", failure.dump(2) + "\n");
        throw;
      }
      if (options.write_checkpoints) {
        Checkpoint c{config_text, hash, ordering_seed, class_order, model, to_matrices(r, tasks)};
        save_checkpoint((dir / ("task_" + std::to_string(step) + ".cpns")).string(), c);
      }
      const HistoryRow& h = r.history.back();
      log_line(options, "ordering " + std::to_string(ordering_seed) + " task " + std::to_string(step) + "/" +
                            std::to_string(tasks) + ": R_tt " + pct(h.task_il_diagonal) + "%, task-IL ACC " +
                            pct(h.task_il_acc) + "%, free " + std::to_string(static_cast<long long>(h.free_params)) +
                            ", min layer free " + pct(h.min_layer_free) + "%");
    }
    write_ordering(dir, r);
    result.orderings.push_back(std::move(r));
  }
  write_text(result.directory / "metrics.json", metrics_json(config, result.orderings));
  return result;
}

MaskStats analyze_masks(const ContinualModel& model) {
  const auto& entries = model.registry.entries();
  if (entries.empty()) throw StateError("no task has been registered");
  const Network<float>& net = model.network;
  const std::size_t tasks = entries.size();
  MaskStats stats;
  std::vector<double> counts(tasks + 1, 0.0);
  double total = 0.0;

  for (const auto& l : net.layers) {
    if (!l.prunable()) continue;
    LayerMaskStats s;
    const auto& w = net.params[static_cast<std::size_t>(l.weight)];
    s.layer = w.name.substr(0, w.name.rfind('.'));
    std::vector<int> ids{l.weight};
    if (l.bias >= 0) ids.push_back(l.bias);
    Index in_union = 0, in_all = 0;
    std::vector<Index> per_task(tasks, 0);
    for (int id : ids) {
      const auto n = static_cast<std::size_t>(net.params[static_cast<std::size_t>(id)].size());
      s.params += static_cast<Index>(n);
      for (std::size_t p = 0; p < n; ++p) {
        std::size_t k = 0;
        for (std::size_t t = 0; t < tasks; ++t) {
          if (entries[t].mask.params[static_cast<std::size_t>(id)].test(p)) {
            ++k;
            ++per_task[t];
          }
        }
        in_union += k > 0;
        in_all += k == tasks;
        counts[k] += 1.0;
      }
    }
    total += static_cast<double>(s.params);
    s.union_pct = 100.0 * static_cast<double>(in_union) / static_cast<double>(s.params);
    s.intersection_pct = 100.0 * static_cast<double>(in_all) / static_cast<double>(s.params);
    for (Index c : per_task) s.task_pct.push_back(100.0 * static_cast<double>(c) / static_cast<double>(s.params));
    stats.layers.push_back(std::move(s));
  }
  for (double c : counts) stats.histogram.push_back(total > 0 ? 100.0 * c / total : 0.0);
  return stats;
}

std::string mask_stats_json(const MaskStats& stats) {
  json layers = json::array();
  for (const auto& l : stats.layers) {
    layers.push_back({{"layer", l.layer},
                      {"params", l.params},
                      {"union_pct", l.union_pct},
                      {"intersection_pct", l.intersection_pct},
                      {"task_pct", l.task_pct}});
  }
  json hist = json::object();
  for (std::size_t k = 0; k < stats.histogram.size(); ++k) hist[std::to_string(k)] = stats.histogram[k];
  return json{{"layers", layers}, {"tasks_per_parameter_pct", hist}}.dump(2) + "\n";
}

std::string evaluate_checkpoint(const Checkpoint& checkpoint, SelectionStrategy strategy, Index batch_size) {
  if (checkpoint.config_json.empty()) throw StateError("checkpoint carries no experiment config");
  const ExperimentConfig config = parse_config(checkpoint.config_json);
  const ContinualModel& model = checkpoint.model;
  if (model.registry.empty()) throw StateError("checkpoint has no registered task");
  const Dataset data = load_dataset(config.data);
  TaskStream stream = build_stream(config, data, checkpoint.ordering_seed);
  stream.tasks.resize(model.registry.size());

  std::vector<double> task_il;
  for (const auto& t : stream.tasks) task_il.push_back(task_il_accuracy(model, static_cast<TaskId>(task_il.size() + 1), t.test));
  const std::uint64_t seed = derive_seed(derive_seed(config.learn.seed, {checkpoint.ordering_seed}),
                                         {kEval, static_cast<std::uint64_t>(stream.tasks.size()), static_cast<std::uint64_t>(batch_size)});
  const StreamResult sr = classify_stream(model, stream.tasks, batch_size, strategy, seed);

  auto to_pct = [](const std::vector<double>& v) {
    std::vector<double> out;
    for (double x : v) out.push_back(100.0 * x);
    return out;
  };
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return 100.0 * s / static_cast<double>(v.size());
  };
  std::vector<std::vector<int>> confusion;
  for (Index i = 0; i < sr.confusion.rows(); ++i) {
    confusion.emplace_back();
    for (Index j = 0; j < sr.confusion.cols(); ++j) confusion.back().push_back(sr.confusion(i, j));
  }
  const json out{{"tasks", stream.tasks.size()},
                 {"strategy", to_string(strategy)},
                 {"batch_size", batch_size},
                 {"task_il_pct", to_pct(task_il)},
                 {"task_il_acc_pct", mean(task_il)},
                 {"class_il_pct", to_pct(sr.class_il_accuracy)},
                 {"class_il_acc_pct", mean(sr.class_il_accuracy)},
                 {"selection_pct", to_pct(sr.selection_accuracy)},
                 {"selection_confusion", confusion}};
  return out.dump(2) + "\n";
}

std::string report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InputError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
  }
  if (files.empty()) throw InputError("no metrics.json below " + dir.string());
  std::sort(files.begin(), files.end());

  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  auto cell = [&](const json& m) {
    if (m.is_null()) return std::string("n/a");
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << m.at("mean").get<double>() << " +- " << m.at("std").get<double>();
    return s.str();
  };
  for (const auto& f : files) {
    std::ifstream in(f);
    json m;
    try {
      m = json::parse(in);
    } catch (const json::exception& e) {
      throw FormatError(f.string() + ": " + e.what());
    }
    out << "## " << m.value("name", std::string("?")) << " (" << fs::relative(f.parent_path(), dir).string() << ")\n";
    out << "tasks " << m.at("tasks").get<int>() << ", orderings " << m.at("orderings").dump() << ", values in %\n\n";
    out << "| mode | ACC | BWT | AIA | selection |\n|---|---|---|---|---|\n";
    const json& t = m.at("task_il");
    out << "| task-IL | " << cell(t.at("acc")) << " | " << cell(t.at("bwt")) << " | " << cell(t.at("aia")) << " | - |\n";
    for (auto it = m.at("class_il").begin(); it != m.at("class_il").end(); ++it) {
      const json& c = it.value();
      out << "| class-IL " << it.key() << " | " << cell(c.at("acc")) << " | " << cell(c.at("bwt")) << " | "
          << cell(c.at("aia")) << " | " << cell(m.at("selection_accuracy_final_step").at(it.key())) << " |\n";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace cps
