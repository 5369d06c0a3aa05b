#pragma once

// Run configuration as a flat `key = value` document.
//
// Every key has a default; presets overwrite a subset; a config file (or
// command-line overrides) may then overwrite any key. Unknown keys are hard
// errors. The canonical form (all keys, sorted, one per line) is what gets
// hashed and echoed into run directories and checkpoints.

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "peeler/datasets.hpp"
#include "peeler/episodes.hpp"
#include "peeler/error.hpp"
#include "peeler/losses.hpp"
#include "peeler/model.hpp"
#include "peeler/optim.hpp"

namespace peeler {

enum class Mode { kFewShot, kLargeScale };

struct TrainConfig {
  Mode mode = Mode::kFewShot;

  // Data: "synthetic" or a path to a delimited file.
  std::string data = "synthetic";
  std::string delimiter = "comma";  // comma | tab
  SyntheticSpec synthetic{20, 8, 100, 1.0, 0.5, 1};
  std::array<double, 3> split{0.5, 0.0, 0.5};
  std::uint64_t split_seed = 1;
  bool allow_empty_split = true;
  double holdout = 0.2;  // large-scale: held-out fraction of each training class

  EpisodeConfig episode{5, 1, 15, 5, 15};
  std::size_t batch_per_class = 8;  // large-scale

  HeadKind head = HeadKind::kMahalanobis;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t embed_dim = 16;

  double lambda = 0.5;
  Reduction reduction = Reduction::kMean;
  double lr = 1e-3;
  LrSchedule schedule{{1000, 2000}, 0.1};
  std::uint64_t episodes = 3000;
  double clip_norm = 0.0;  // 0 disables clipping

  EpisodeConfig eval_episode{5, 1, 15, 5, 15};
  std::size_t eval_episodes = 600;
  std::uint64_t eval_seed = 1000;

  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t log_every = 100;

  // Not part of the content hash.
  std::string out = "";
  std::size_t workers = 1;

  bool large_scale() const { return mode == Mode::kLargeScale; }

  ModelConfig model_config(std::size_t input_dim, std::size_t n_train_classes) const {
    ModelConfig m;
    m.input_dim = input_dim;
    m.hidden = hidden;
    m.embed_dim = embed_dim;
    m.head = HeadConfig::for_regime(head, large_scale());
    m.n_learned_classes = large_scale() ? n_train_classes : 0;
    return m;
  }

  void validate() const {
    synthetic.validate();
    schedule.validate();
    validate_head();
    if (large_scale()) {
      if (episode.open_way < 1) throw ConfigError("large-scale mode needs open_way >= 1");
      if (batch_per_class < 1) throw ConfigError("batch_per_class must be >= 1");
      if (!(holdout > 0.0 && holdout < 1.0)) throw ConfigError("holdout must be in (0, 1)");
    } else {
      episode.validate();
      eval_episode.validate();
    }
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
    if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (delimiter != "comma" && delimiter != "tab") throw ConfigError("delimiter must be comma or tab");
  }

  char delimiter_char() const { return delimiter == "tab" ? '\t' : ','; }

 private:
  void validate_head() const {
    if (head == HeadKind::kLinear && !large_scale()) throw ConfigError("head linear is only available in largescale mode");
    HeadConfig::for_regime(head, large_scale()).validate();
  }
};

namespace detail {

inline std::string join_list(const auto& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

template <typename T>
std::vector<T> parse_uint_list(std::string_view key, std::string_view s) {
  std::vector<T> out;
  if (trim(s).empty()) return out;
  for (auto f : split_fields(s, ',')) {
    const auto v = parse_integer(f);
    if (!v || *v < 0) throw ConfigError("config key '" + std::string(key) + "': bad list element '" + std::string(f) + "'");
    out.push_back(static_cast<T>(*v));
  }
  return out;
}

inline std::uint64_t parse_uint(std::string_view key, std::string_view s) {
  s = trim(s);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || p != s.data() + s.size()) {
    throw ConfigError("config key '" + std::string(key) + "': expected nonnegative integer, got '" + std::string(s) + "'");
  }
  return v;
}

inline double parse_double(std::string_view key, std::string_view s) {
  const auto v = parse_real(trim(s));
  if (!v) throw ConfigError("config key '" + std::string(key) + "': expected number, got '" + std::string(s) + "'");
  return *v;
}

inline bool parse_bool(std::string_view key, std::string_view s) {
  s = trim(s);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true/false, got '" + std::string(s) + "'");
}

struct Field {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, std::string_view)> set;
  bool hashed = true;
};

inline const std::map<std::string, Field>& fields() {
  using C = TrainConfig;
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    auto u64 = [&f](std::string key, auto getter) {
      f[key] = {[getter](const C& c) { return std::to_string(getter(c)); },
                [getter, key](C& c, std::string_view v) {
                  getter(c) = static_cast<std::remove_reference_t<decltype(getter(c))>>(parse_uint(key, v));
                }};
    };
    auto real = [&f](std::string key, auto getter) {
      f[key] = {[getter](const C& c) { return format_real(getter(c)); },
                [getter, key](C& c, std::string_view v) { getter(c) = parse_double(key, v); }};
    };

    f["mode"] = {[](const C& c) { return std::string(c.large_scale() ? "largescale" : "fewshot"); },
                 [](C& c, std::string_view v) {
                   v = trim(v);
                   if (v == "fewshot") c.mode = Mode::kFewShot;
                   else if (v == "largescale") c.mode = Mode::kLargeScale;
                   else throw ConfigError("config key 'mode': expected fewshot|largescale, got '" + std::string(v) + "'");
                 }};
    f["data"] = {[](const C& c) { return c.data; }, [](C& c, std::string_view v) { c.data = std::string(trim(v)); }};
    f["data.delimiter"] = {[](const C& c) { return c.delimiter; },
                           [](C& c, std::string_view v) { c.delimiter = std::string(trim(v)); }};
    u64("synthetic.classes", [](auto& c) -> auto& { return c.synthetic.n_classes; });
    u64("synthetic.dim", [](auto& c) -> auto& { return c.synthetic.dim; });
    u64("synthetic.samples_per_class", [](auto& c) -> auto& { return c.synthetic.samples_per_class; });
    real("synthetic.center_scale", [](auto& c) -> auto& { return c.synthetic.center_scale; });
    real("synthetic.within_std", [](auto& c) -> auto& { return c.synthetic.within_std; });
    u64("synthetic.seed", [](auto& c) -> auto& { return c.synthetic.seed; });
    real("split.train", [](auto& c) -> auto& { return c.split[0]; });
    real("split.val", [](auto& c) -> auto& { return c.split[1]; });
    real("split.test", [](auto& c) -> auto& { return c.split[2]; });
    u64("split.seed", [](auto& c) -> auto& { return c.split_seed; });
    f["split.allow_empty"] = {[](const C& c) { return std::string(c.allow_empty_split ? "true" : "false"); },
                              [](C& c, std::string_view v) { c.allow_empty_split = parse_bool("split.allow_empty", v); }};
    real("holdout", [](auto& c) -> auto& { return c.holdout; });

    u64("way", [](auto& c) -> auto& { return c.episode.way; });
    u64("shot", [](auto& c) -> auto& { return c.episode.shot; });
    u64("query", [](auto& c) -> auto& { return c.episode.query_per_class; });
    u64("open_way", [](auto& c) -> auto& { return c.episode.open_way; });
    u64("open_query", [](auto& c) -> auto& { return c.episode.open_query_per_class; });
    u64("batch_per_class", [](auto& c) -> auto& { return c.batch_per_class; });

    f["head"] = {[](const C& c) {
                   switch (c.head) {
                     case HeadKind::kEuclidean: return std::string("euclidean");
                     case HeadKind::kMahalanobis: return std::string("mahalanobis");
                     case HeadKind::kLinear: return std::string("linear");
                   }
                   return std::string();
                 },
                 [](C& c, std::string_view v) {
                   v = trim(v);
                   if (v == "euclidean") c.head = HeadKind::kEuclidean;
                   else if (v == "mahalanobis") c.head = HeadKind::kMahalanobis;
                   else if (v == "linear") c.head = HeadKind::kLinear;
                   else throw ConfigError("config key 'head': expected euclidean|mahalanobis|linear, got '" + std::string(v) + "'");
                 }};
    f["hidden"] = {[](const C& c) { return join_list(c.hidden); },
                   [](C& c, std::string_view v) { c.hidden = parse_uint_list<std::size_t>("hidden", v); }};
    u64("embed_dim", [](auto& c) -> auto& { return c.embed_dim; });

    real("lambda", [](auto& c) -> auto& { return c.lambda; });
    f["reduction"] = {[](const C& c) { return std::string(c.reduction == Reduction::kMean ? "mean" : "sum"); },
                      [](C& c, std::string_view v) {
                        v = trim(v);
                        if (v == "mean") c.reduction = Reduction::kMean;
                        else if (v == "sum") c.reduction = Reduction::kSum;
                        else throw ConfigError("config key 'reduction': expected mean|sum, got '" + std::string(v) + "'");
                      }};
    real("lr", [](auto& c) -> auto& { return c.lr; });
    real("lr_factor", [](auto& c) -> auto& { return c.schedule.factor; });
    f["milestones"] = {[](const C& c) { return join_list(c.schedule.milestones); },
                       [](C& c, std::string_view v) {
                         c.schedule.milestones = parse_uint_list<std::uint64_t>("milestones", v);
                       }};
    u64("episodes", [](auto& c) -> auto& { return c.episodes; });
    real("clip_norm", [](auto& c) -> auto& { return c.clip_norm; });

    u64("eval.way", [](auto& c) -> auto& { return c.eval_episode.way; });
    u64("eval.shot", [](auto& c) -> auto& { return c.eval_episode.shot; });
    u64("eval.query", [](auto& c) -> auto& { return c.eval_episode.query_per_class; });
    u64("eval.open_way", [](auto& c) -> auto& { return c.eval_episode.open_way; });
    u64("eval.open_query", [](auto& c) -> auto& { return c.eval_episode.open_query_per_class; });
    u64("eval.episodes", [](auto& c) -> auto& { return c.eval_episodes; });
    u64("eval.seed", [](auto& c) -> auto& { return c.eval_seed; });

    u64("seed", [](auto& c) -> auto& { return c.seed; });
    u64("checkpoint_every", [](auto& c) -> auto& { return c.checkpoint_every; });
    u64("log_every", [](auto& c) -> auto& { return c.log_every; });

    f["out"] = {[](const C& c) { return c.out; }, [](C& c, std::string_view v) { c.out = std::string(trim(v)); }, false};
    u64("workers", [](auto& c) -> auto& { return c.workers; });
    f["workers"].hashed = false;
    return f;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : detail::fields()) keys.push_back(k);
  return keys;
}

inline void set_config_value(TrainConfig& cfg, std::string_view key, std::string_view value) {
  const auto& f = detail::fields();
  const auto it = f.find(std::string(detail::trim(key)));
  if (it == f.end()) throw ConfigError("unknown config key '" + std::string(detail::trim(key)) + "'");
  it->second.set(cfg, value);
}

inline std::string get_config_value(const TrainConfig& cfg, std::string_view key) {
  const auto& f = detail::fields();
  const auto it = f.find(std::string(key));
  if (it == f.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  return it->second.get(cfg);
}

inline std::vector<std::string> preset_names() { return {"desk", "paper-fewshot", "paper-largescale"}; }

// desk: the defaults. paper-*: the published protocol's counts and schedule.
inline TrainConfig preset(std::string_view name) {
  TrainConfig c;
  if (name == "desk") return c;
  if (name == "paper-fewshot") {
    c.episode = {5, 1, 15, 5, 15};
    c.eval_episode = c.episode;
    c.lambda = 0.5;
    c.lr = 1e-3;
    c.schedule = {{10000, 20000}, 0.1};
    c.episodes = 30000;
    c.eval_episodes = 600;
    c.head = HeadKind::kMahalanobis;
    return c;
  }
  if (name == "paper-largescale") {
    c.mode = Mode::kLargeScale;
    c.synthetic = {10, 8, 500, 1.0, 0.5, 1};
    c.split = {0.6, 0.0, 0.4};
    c.episode = {4, 1, 15, 2, 15};
    c.eval_episode = {6, 1, 15, 4, 15};
    c.batch_per_class = 8;
    c.lambda = 0.5;
    c.lr = 1e-3;
    c.schedule = {{6000, 8000}, 0.1};
    c.episodes = 10000;
    c.eval_episodes = 600;
    c.head = HeadKind::kMahalanobis;
    return c;
  }
  std::string known;
  for (const auto& p : preset_names()) known += " " + p;
  throw ConfigError("unknown preset '" + std::string(name) + "' (known:" + known + ")");
}

// Parses a key/value document on top of `base`. '#' starts a comment. A
// `preset` key, if present, must come before any other key and replaces base.
inline TrainConfig parse_config(std::string_view text, TrainConfig base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool any_key = false;
  while (std::getline(in, line)) {
    ++line_no;
    auto body = std::string_view(line);
    if (const auto hash = body.find('#'); hash != body.npos) body = body.substr(0, hash);
    body = detail::trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == body.npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = detail::trim(body.substr(0, eq));
    const auto value = detail::trim(body.substr(eq + 1));
    if (key == "preset") {
      if (any_key) throw ConfigError("config line " + std::to_string(line_no) + ": preset must precede other keys");
      base = preset(value);
      continue;
    }
    any_key = true;
    set_config_value(base, key, value);
  }
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// All keys, sorted, `key = value` per line. With hashed_only, omits keys that
// do not affect results.
inline std::string serialize_config(const TrainConfig& cfg, bool hashed_only = false) {
  std::string s;
  for (const auto& [k, f] : detail::fields()) {
    if (hashed_only && !f.hashed) continue;
    s += k + " = " + f.get(cfg) + "\n";
  }
  return s;
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 digest failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xF];
  }
  return out;
}

inline std::string config_hash(const TrainConfig& cfg) { return sha256_hex(serialize_config(cfg, true)); }

}  // namespace peeler
