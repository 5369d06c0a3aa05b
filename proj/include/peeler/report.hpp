#pragma once

// Machine- and human-readable forms of training and evaluation results.
// Nothing here records paths or wall-clock time, so equal inputs produce
// byte-identical files.

#include <cstdio>
#include <optional>
#include <string>

#include <json.hpp>

#include "peeler/config.hpp"
#include "peeler/eval_metrics.hpp"
#include "peeler/train.hpp"

namespace peeler {

using json = nlohmann::ordered_json;

inline json interval_json(const Interval& i) { return {{"mean", i.mean}, {"ci95", i.half_width}}; }

inline json episode_config_json(const EpisodeConfig& e) {
  return {{"way", e.way},
          {"shot", e.shot},
          {"query", e.query_per_class},
          {"open_way", e.open_way},
          {"open_query", e.open_query_per_class}};
}

struct EvalContext {
  std::string config_hash;
  std::string checkpoint_sha256;
  std::uint64_t trained_episodes = 0;
  std::uint64_t eval_seed = 0;
  EpisodeConfig episode;
  bool large_scale = false;
};

inline json summary_json(const EvalContext& ctx, const AggregateReport& r) {
  json j;
  j["config_hash"] = ctx.config_hash;
  j["checkpoint_sha256"] = ctx.checkpoint_sha256;
  j["trained_episodes"] = ctx.trained_episodes;
  j["mode"] = ctx.large_scale ? "largescale" : "fewshot";
  j["eval_seed"] = ctx.eval_seed;
  j["episode"] = episode_config_json(ctx.episode);
  j["n_episodes"] = r.n_episodes;
  j["accuracy"] = interval_json(r.accuracy);
  j["auroc"] = r.auroc ? interval_json(*r.auroc) : json(nullptr);
  return j;
}

inline std::string summary_text(const EvalContext& ctx, const AggregateReport& r) {
  char buf[256];
  std::string s;
  s += "config_hash  " + ctx.config_hash + "\n";
  s += "episodes     " + std::to_string(r.n_episodes) + " (seed " + std::to_string(ctx.eval_seed) + ")\n";
  if (ctx.large_scale) {
    std::snprintf(buf, sizeof buf, "task         all trained classes seen, %zu open classes x %zu queries\n",
                  ctx.episode.open_way, ctx.episode.open_query_per_class);
  } else {
    std::snprintf(buf, sizeof buf, "task         %zu-way %zu-shot, %zu open classes x %zu queries\n", ctx.episode.way,
                  ctx.episode.shot, ctx.episode.open_way, ctx.episode.open_query_per_class);
  }
  s += buf;
  std::snprintf(buf, sizeof buf, "accuracy     %.2f +- %.2f\n", 100.0 * r.accuracy.mean, 100.0 * r.accuracy.half_width);
  s += buf;
  if (r.auroc) {
    std::snprintf(buf, sizeof buf, "auroc        %.2f +- %.2f\n", 100.0 * r.auroc->mean, 100.0 * r.auroc->half_width);
    s += buf;
  } else {
    s += "auroc        absent (no open queries)\n";
  }
  return s;
}

// One line per episode.
inline std::string episodes_jsonl(const AggregateReport& r) {
  std::string s;
  for (const auto& e : r.episodes) {
    json j;
    j["episode"] = e.index;
    j["accuracy"] = e.accuracy;
    j["auroc"] = e.auroc ? json(*e.auroc) : json(nullptr);
    j["n_seen"] = e.seen_scores.size();
    j["n_unseen"] = e.unseen_scores.size();
    s += j.dump() + "\n";
  }
  return s;
}

inline json train_record_json(const TrainRecord& r) {
  return {{"episode", r.episode},        {"lr", r.lr},
          {"closed_ce", r.closed_ce},    {"open_entropy", r.open_entropy_term},
          {"lambda", r.lambda},          {"total", r.total},
          {"wall_time", r.wall_time}};
}

inline json train_summary_json(const TrainConfig& cfg, const TrainLoopState& s) {
  const double n = s.stats.count ? static_cast<double>(s.stats.count) : 1.0;
  return {{"config_hash", config_hash(cfg)},
          {"base_seed", s.base_seed},
          {"episodes", s.episode},
          {"mean_total", s.stats.sum_total / n},
          {"mean_closed_ce", s.stats.sum_closed_ce / n},
          {"mean_open_entropy", s.stats.sum_open / n},
          {"rejected_steps", s.stats.rejected_steps}};
}

}  // namespace peeler
