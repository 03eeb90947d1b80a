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

#include "cps/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <filesystem>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "json.hpp"

#include "cps/config.hpp"
#include "cps/error.hpp"
#include "cps/rng.hpp"

namespace cps {
namespace {

using nlohmann::json;

template <typename T>
T byteswap_if_big(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
    std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
  }
  return v;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    v = byteswap_if_big(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  template <typename T, typename Range>
  void put_all(const Range& r) {
    for (const auto& v : r) put(static_cast<T>(v));
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::size_t base) : bytes_(bytes), base_(base) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return byteswap_if_big(v);
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return base_ + pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(base_ + bytes_.size()) + ", needed " +
                        std::to_string(n) + " bytes at offset " + std::to_string(base_ + pos_));
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

json layer_json(const LayerSpec& l) {
  return json{{"kind", to_string(l.kind)}, {"in", l.in},         {"out", l.out},
              {"kernel", l.kernel},        {"stride", l.stride}, {"padding", l.padding},
              {"skip_from", l.skip_from}};
}

LayerSpec layer_from_json(const json& j) {
  LayerSpec l;
  l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  l.in = j.at("in").get<Index>();
  l.out = j.at("out").get<Index>();
  l.kernel = j.at("kernel").get<Index>();
  l.stride = j.at("stride").get<Index>();
  l.padding = j.at("padding").get<Index>();
  l.skip_from = j.at("skip_from").get<Index>();
  return l;
}

void put_floats(Writer& w, const Vector<float>& v) {
  for (Index i = 0; i < v.size(); ++i) w.put(v[i]);
}

void get_floats(Reader& r, Vector<float>& v, Index n) {
  v.resize(n);
  for (Index i = 0; i < n; ++i) v[i] = r.get<float>();
}

void put_matrix(Writer& w, const Eigen::MatrixXd& m) {
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) w.put(m(i, j));
  }
}

Eigen::MatrixXd get_matrix(Reader& r, Index rows, Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = r.get<double>();
  }
  return m;
}

void put_bitset(Writer& w, const Bitset& b) {
  std::vector<std::uint64_t> blocks(b.num_blocks());
  boost::to_block_range(b, blocks.begin());
  for (auto v : blocks) w.put(v);
}

Bitset get_bitset(Reader& r, std::size_t bits) {
  std::vector<std::uint64_t> blocks((bits + 63) / 64);
  for (auto& v : blocks) v = r.get<std::uint64_t>();
  Bitset b(blocks.begin(), blocks.end());
  b.resize(bits);
  return b;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  const Network<float>& net = c.model.network;
  Writer payload;
  for (const auto& p : net.params) put_floats(payload, p.values);
  for (const auto& p : net.params) payload.put_all<std::int32_t>(p.owner);

  json tasks = json::array();
  for (const auto& e : c.model.registry.entries()) {
    if (!e.mask.fits(net)) throw StructuralError("mask of task " + std::to_string(e.id) + " does not fit the network");
    if (e.norm.layers.size() != net.norm_channels.size()) throw StructuralError("norm state does not fit the network");
    tasks.push_back({{"id", e.id},
                     {"classes", e.classes},
                     {"features", e.head.features()},
                     {"score_rows", e.selection_scores.rows()},
                     {"score_cols", e.selection_scores.cols()},
                     {"newly_frozen", e.newly_frozen}});
    for (const auto& b : e.mask.params) put_bitset(payload, b);
    for (Index i = 0; i < e.head.weight.rows(); ++i) {
      for (Index j = 0; j < e.head.weight.cols(); ++j) payload.put(e.head.weight(i, j));
    }
    put_floats(payload, e.head.bias);
    for (const auto& l : e.norm.layers) {
      put_floats(payload, l.gamma);
      put_floats(payload, l.beta);
      put_floats(payload, l.running_mean);
      put_floats(payload, l.running_var);
    }
    put_matrix(payload, e.selection_scores);
  }

  json matrices = json::array();
  for (const auto& m : c.matrices) {
    matrices.push_back({{"name", m.name}, {"rows", m.values.rows()}, {"cols", m.values.cols()}});
    put_matrix(payload, m.values);
  }

  json layers = json::array();
  for (const auto& l : net.layers) layers.push_back(layer_json(l));
  json params = json::array();
  for (const auto& p : net.params) {
    params.push_back({{"name", p.name}, {"shape", p.shape.dims()}});
  }

  const json manifest{{"version", kCheckpointVersion},
                      {"config", json::parse(c.config_json.empty() ? "{}" : c.config_json)},
                      {"config_hash", c.config_hash},
                      {"ordering_seed", c.ordering_seed},
                      {"class_order", c.class_order},
                      {"input_shape", net.input_shape.dims()},
                      {"layers", layers},
                      {"params", params},
                      {"tasks", tasks},
                      {"matrices", matrices},
                      {"payload_fnv1a64", fnv1a64(payload.bytes.data(), payload.bytes.size())}};
  const std::string text = manifest.dump();

  Writer out;
  out.put_raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.put(kCheckpointVersion);
  out.put(static_cast<std::uint64_t>(text.size()));
  out.put_raw(text.data(), text.size());
  out.put(static_cast<std::uint64_t>(payload.bytes.size()));
  out.put_raw(payload.bytes.data(), payload.bytes.size());
  return std::move(out.bytes);
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader head(bytes, 0);
  const auto magic = head.take(sizeof(kCheckpointMagic));
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("bad checkpoint magic at byte offset 0, expected CPNS1");
  }
  const auto version = head.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at byte offset 5");
  }
  const auto manifest_size = head.get<std::uint64_t>();
  const std::size_t manifest_at = head.offset();
  const auto text = head.take(manifest_size);
  json m;
  try {
    m = json::parse(text.begin(), text.end());
  } catch (const json::exception& e) {
    throw FormatError("unreadable manifest at byte offset " + std::to_string(manifest_at) + ": " + e.what());
  }
  const auto payload_size = head.get<std::uint64_t>();
  const std::size_t payload_at = head.offset();
  const auto payload_bytes = head.take(payload_size);
  if (!head.done()) throw FormatError("trailing bytes after payload at byte offset " + std::to_string(head.offset()));

  Checkpoint c;
  try {
    if (fnv1a64(payload_bytes.data(), payload_bytes.size()) != m.at("payload_fnv1a64").get<std::uint64_t>()) {
      throw FormatError("payload hash mismatch (payload starts at byte offset " + std::to_string(payload_at) + ")");
    }
    const json& config = m.at("config");
    c.config_json = config.empty() ? std::string() : config.dump();
    c.config_hash = m.at("config_hash").get<std::uint64_t>();
    c.ordering_seed = m.at("ordering_seed").get<std::uint64_t>();
    c.class_order = m.at("class_order").get<std::vector<int>>();

    Shape input(m.at("input_shape").get<std::vector<Index>>());
    NetworkBuilder<float> builder(input);
    for (const auto& l : m.at("layers")) builder.append(layer_from_json(l));
    Rng unused(0);
    c.model.network = builder.build(unused);
    Network<float>& net = c.model.network;
    const json& params = m.at("params");
    if (params.size() != net.params.size()) throw FormatError("manifest lists a different parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].at("name").get<std::string>() != net.params[i].name ||
          !(Shape(params[i].at("shape").get<std::vector<Index>>()) == net.params[i].shape)) {
        throw FormatError("parameter " + std::to_string(i) + " does not match the replayed layers");
      }
    }

    Reader r(payload_bytes, payload_at);
    for (auto& p : net.params) get_floats(r, p.values, p.size());
    for (auto& p : net.params) {
      for (auto& o : p.owner) o = r.get<std::int32_t>();
    }

    for (const auto& t : m.at("tasks")) {
      TaskEntry e;
      e.id = t.at("id").get<TaskId>();
      e.classes = t.at("classes").get<std::vector<int>>();
      e.newly_frozen = t.at("newly_frozen").get<std::size_t>();
      for (const auto& p : net.params) e.mask.params.push_back(get_bitset(r, static_cast<std::size_t>(p.size())));
      const auto classes = static_cast<Index>(e.classes.size());
      const auto features = t.at("features").get<Index>();
      e.head.weight.resize(classes, features);
      for (Index i = 0; i < classes; ++i) {
        for (Index j = 0; j < features; ++j) e.head.weight(i, j) = r.get<float>();
      }
      get_floats(r, e.head.bias, classes);
      e.head.weight_grad = Matrix<float>::Zero(classes, features);
      e.head.bias_grad = Vector<float>::Zero(classes);
      e.norm = NormState<float>::fresh(net);
      for (auto& l : e.norm.layers) {
        const Index n = l.gamma.size();
        get_floats(r, l.gamma, n);
        get_floats(r, l.beta, n);
        get_floats(r, l.running_mean, n);
        get_floats(r, l.running_var, n);
      }
      e.selection_scores = get_matrix(r, t.at("score_rows").get<Index>(), t.at("score_cols").get<Index>());
      c.model.registry.add(std::move(e));
    }
    for (const auto& mm : m.at("matrices")) {
      NamedMatrix nm{mm.at("name").get<std::string>(), {}};
      nm.values = get_matrix(r, mm.at("rows").get<Index>(), mm.at("cols").get<Index>());
      c.matrices.push_back(std::move(nm));
    }
    if (!r.done()) throw FormatError("unread payload bytes at byte offset " + std::to_string(r.offset()));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  } catch (const StructuralError& e) {
    throw FormatError(std::string("manifest describes an invalid network: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const auto bytes = serialize_checkpoint(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_checkpoint(bytes);
}

const NamedMatrix* find_matrix(const Checkpoint& c, const std::string& name) {
  for (const auto& m : c.matrices) {
    if (m.name == name) return &m;
  }
  return nullptr;
}

}  // namespace cps
