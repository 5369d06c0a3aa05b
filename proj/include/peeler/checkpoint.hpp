#pragma once

// Checkpoint text format, version 1:
//
//   peeler-checkpoint 1
//   config_hash <sha256 of the hashed config keys>
//   base_seed <n>
//   episode <n>
//   input_dim <n>
//   learned_classes <n>
//   adam_step <n>
//   stats <count> <sum_total> <sum_closed_ce> <sum_open> <rejected_steps>
//   begin config
//   <key> = <value>            (hashed config keys only)
//   end config
//   tensor <name> <rank> <dim>...
//   <values, space separated, %.17g>
//   ...
//
// Tensor names: "param/<name>", "adam.m/<name>", "adam.v/<name>". Every real
// is written with 17 significant digits, so loading restores the state bit
// for bit.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "peeler/config.hpp"
#include "peeler/error.hpp"
#include "peeler/train.hpp"

namespace peeler {

struct Checkpoint {
  TrainConfig config;
  std::string config_hash;
  std::size_t input_dim = 0;
  std::size_t learned_classes = 0;
  TrainLoopState state;
};

namespace detail {

inline void write_values(std::ostream& os, const std::string& name, const Shape& shape, std::span<const double> v) {
  os << "tensor " << name << ' ' << shape.size();
  for (auto d : shape) os << ' ' << d;
  os << '\n';
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << format_real(v[i]);
  os << '\n';
}

}  // namespace detail

inline std::string checkpoint_to_string(const TrainConfig& cfg, const TrainLoopState& state) {
  std::ostringstream os;
  const auto& model = state.model;
  const auto& s = state.stats;
  os << "peeler-checkpoint 1\n";
  os << "config_hash " << config_hash(cfg) << '\n';
  os << "base_seed " << state.base_seed << '\n';
  os << "episode " << state.episode << '\n';
  os << "input_dim " << model.config.input_dim << '\n';
  os << "learned_classes " << model.config.n_learned_classes << '\n';
  os << "adam_step " << state.adam.step << '\n';
  os << "stats " << s.count << ' ' << detail::format_real(s.sum_total) << ' ' << detail::format_real(s.sum_closed_ce)
     << ' ' << detail::format_real(s.sum_open) << ' ' << s.rejected_steps << '\n';
  os << "begin config\n" << serialize_config(cfg, true) << "end config\n";
  for (const auto& p : model.parameters()) {
    detail::write_values(os, "param/" + p.name, p.tensor->shape(), p.tensor->data());
    const auto m = state.adam.m.find(p.name);
    const auto v = state.adam.v.find(p.name);
    if (m != state.adam.m.end()) detail::write_values(os, "adam.m/" + p.name, p.tensor->shape(), m->second);
    if (v != state.adam.v.end()) detail::write_values(os, "adam.v/" + p.name, p.tensor->shape(), v->second);
  }
  return os.str();
}

// Writes via a temporary file and rename, so readers never see a partial file.
inline void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const TrainLoopState& state) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + tmp);
    out << checkpoint_to_string(cfg, state);
    if (!out) throw DataError("write failed for checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint checkpoint_from_string(const std::string& text, const std::string& origin = "checkpoint") {
  std::istringstream in(text);
  auto fail = [&](const std::string& what) { return DataError(origin + ": " + what); };
  std::string line;
  auto next = [&]() -> std::string {
    if (!std::getline(in, line)) throw fail("unexpected end of file");
    return line;
  };
  auto expect_kv = [&](const std::string& key) -> std::string {
    const auto l = next();
    if (l.rfind(key + " ", 0) != 0) throw fail("expected '" + key + "', got '" + l + "'");
    return l.substr(key.size() + 1);
  };
  auto to_u64 = [&](const std::string& key, const std::string& s) {
    try {
      return detail::parse_uint(key, s);
    } catch (const ConfigError& e) {
      throw fail(e.what());
    }
  };
  auto to_real = [&](std::string_view s) {
    const auto v = detail::parse_real(s);
    if (!v) throw fail("bad real '" + std::string(s) + "'");
    return *v;
  };

  if (next() != "peeler-checkpoint 1") throw fail("not a version-1 checkpoint");
  Checkpoint ck;
  ck.config_hash = expect_kv("config_hash");
  ck.state.base_seed = to_u64("base_seed", expect_kv("base_seed"));
  ck.state.episode = to_u64("episode", expect_kv("episode"));
  ck.input_dim = to_u64("input_dim", expect_kv("input_dim"));
  ck.learned_classes = to_u64("learned_classes", expect_kv("learned_classes"));
  ck.state.adam.step = to_u64("adam_step", expect_kv("adam_step"));
  {
    std::istringstream ss(expect_kv("stats"));
    std::string a, b, c, d, e;
    if (!(ss >> a >> b >> c >> d >> e)) throw fail("malformed stats line");
    ck.state.stats = {to_u64("stats", a), to_real(b), to_real(c), to_real(d), to_u64("stats", e)};
    ck.state.adam.rejected_steps = ck.state.stats.rejected_steps;
  }
  if (next() != "begin config") throw fail("missing config block");
  std::string cfg_text;
  while (next() != "end config") cfg_text += line + "\n";
  ck.config = parse_config(cfg_text);
  if (config_hash(ck.config) != ck.config_hash) throw fail("config block does not match its recorded hash");

  std::map<std::string, Tensor> tensors;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream hs(line);
    std::string tag, name;
    std::size_t rank = 0;
    if (!(hs >> tag >> name >> rank) || tag != "tensor") throw fail("malformed tensor header '" + line + "'");
    Shape shape(rank);
    for (auto& d : shape)
      if (!(hs >> d)) throw fail("malformed tensor shape for " + name);
    const auto values_line = next();
    std::vector<double> values;
    for (auto f : detail::split_fields(values_line, ' ')) {
      if (!f.empty()) values.push_back(to_real(f));
    }
    if (values.size() != numel(shape)) throw fail("tensor " + name + " has wrong value count");
    tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
  }

  Rng unused = derive_rng(ck.state.base_seed, Purpose::kInit);
  auto mcfg = ck.config.model_config(ck.input_dim, ck.learned_classes);
  ck.state.model = Model::init(mcfg, unused);
  for (const auto& p : ck.state.model.parameters()) {
    const auto it = tensors.find("param/" + p.name);
    if (it == tensors.end()) throw fail("missing parameter " + p.name);
    if (it->second.shape() != p.tensor->shape()) {
      throw fail("parameter " + p.name + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                 shape_str(p.tensor->shape()));
    }
    *p.tensor = it->second;
    if (auto m = tensors.find("adam.m/" + p.name); m != tensors.end()) ck.state.adam.m[p.name] = m->second.values();
    if (auto v = tensors.find("adam.v/" + p.name); v != tensors.end()) ck.state.adam.v[p.name] = v->second.values();
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str(), path.string());
}

}  // namespace peeler
