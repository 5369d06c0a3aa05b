#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "peeler/datasets.hpp"
#include "peeler/episodes.hpp"
#include "peeler/error.hpp"
#include "peeler/model.hpp"
#include "peeler/rng.hpp"

namespace peeler {

// Seen-class samples are the positive population: a high max-probability
// means "accept", a low one means "reject as unseen".
inline double rejection_score(std::span<const double> probabilities) {
  if (probabilities.empty()) throw ShapeError("rejection_score: empty posterior row");
  return *std::max_element(probabilities.begin(), probabilities.end());
}

// Fraction of rows whose argmax equals the label; ties go to the lowest index.
inline double accuracy(const Tensor& log_probs, std::span<const std::size_t> labels) {
  const std::size_t b = log_probs.rows(), c = log_probs.cols();
  if (labels.size() != b) throw ShapeError("accuracy: label count does not match rows");
  if (b == 0) throw ShapeError("accuracy: no queries");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) throw DataError("accuracy: label out of range");
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (log_probs[i * c + j] > log_probs[i * c + best]) best = j;
    }
    correct += best == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(b);
}

// Mann-Whitney area with midranks: P(seen > unseen) + P(seen == unseen) / 2.
// Ranks are kept doubled so the U statistics are exact integers; the larger of
// the two complementary areas is divided out and the other is 1 minus it, which
// makes auroc(s, u) + auroc(u, s) == 1 hold exactly in floating point.
inline double auroc(std::span<const double> seen, std::span<const double> unseen) {
  if (seen.empty() || unseen.empty()) throw DataError("auroc: both score populations must be nonempty");
  const std::size_t n = seen.size() + unseen.size();
  std::vector<std::pair<double, bool>> all;
  all.reserve(n);
  for (double s : seen) all.emplace_back(s, true);
  for (double s : unseen) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  std::int64_t rank2_seen = 0;  // sum of doubled midranks of seen samples
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && all[j].first == all[i].first) ++j;
    const auto midrank2 = static_cast<std::int64_t>(i + 1 + j);  // ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second) rank2_seen += midrank2;
    i = j;
  }
  const auto ns = static_cast<std::int64_t>(seen.size());
  const auto nu = static_cast<std::int64_t>(unseen.size());
  const std::int64_t u2_seen = rank2_seen - ns * (ns + 1);
  const std::int64_t u2_unseen = 2 * ns * nu - u2_seen;
  const double denom = 2.0 * static_cast<double>(ns) * static_cast<double>(nu);
  if (u2_seen >= u2_unseen) return static_cast<double>(u2_seen) / denom;
  return 1.0 - static_cast<double>(u2_unseen) / denom;
}

struct EvalEpisodeResult {
  std::size_t index = 0;
  double accuracy = 0.0;
  std::vector<double> seen_scores;
  std::vector<double> unseen_scores;
  std::optional<double> auroc;  // absent without open queries
};

struct Interval {
  double mean = 0.0;
  double half_width = 0.0;  // 1.96 * sample std / sqrt(n)
};

struct AggregateReport {
  std::size_t n_episodes = 0;
  Interval accuracy;
  std::optional<Interval> auroc;
  std::vector<EvalEpisodeResult> episodes;
};

// 95% normal-approximation interval. A single value has half-width 0.
inline Interval mean_interval(std::span<const double> xs) {
  if (xs.empty()) throw DataError("mean_interval: no values");
  // Constant input: return it exactly rather than a rounded mean and residue.
  if (std::all_of(xs.begin(), xs.end(), [&](double x) { return x == xs[0]; })) return {xs[0], 0.0};
  const double n = static_cast<double>(xs.size());
  double m = 0.0;
  for (double x : xs) m += x;
  m /= n;
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {m, 1.96 * sd / std::sqrt(n)};
}

// Folds per-episode results in episode-index order.
inline AggregateReport aggregate(std::vector<EvalEpisodeResult> results) {
  if (results.empty()) throw DataError("aggregate: no episodes");
  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  AggregateReport r;
  r.n_episodes = results.size();
  std::vector<double> acc, au;
  for (const auto& e : results) {
    acc.push_back(e.accuracy);
    if (e.auroc) au.push_back(*e.auroc);
  }
  r.accuracy = mean_interval(acc);
  if (!au.empty()) r.auroc = mean_interval(au);
  r.episodes = std::move(results);
  return r;
}

inline EvalEpisodeResult score_eval_episode(const Model& model, const LabeledDataset& ds, const Episode& ep,
                                            std::size_t index) {
  Tape tape(GradMode::kNone);
  const auto scores = score_episode(tape, model, ds, ep);
  EvalEpisodeResult r;
  r.index = index;
  r.accuracy = accuracy(scores.closed.log_probs.value(), ep.closed_labels);
  r.seen_scores = scores.closed.scores;
  if (scores.open) {
    r.unseen_scores = scores.open->scores;
    r.auroc = auroc(r.seen_scores, r.unseen_scores);
  }
  return r;
}

struct EvalSetup {
  EpisodeConfig episode;
  std::size_t n_episodes = 600;
  std::uint64_t base_seed = 0;
  std::size_t workers = 1;
};

// Large-scale evaluation episode: every trained class is seen, closed queries
// come from held-out samples of those classes, open queries from M test
// classes.
inline Episode sample_largescale_eval_episode(const LabeledDataset& ds, const ClassSplit& split,
                                              const SampleHoldout& holdout, const EpisodeConfig& cfg, Rng& rng) {
  Episode ep;
  for (std::size_t s = 0; s < split.train_classes.size(); ++s) {
    const auto c = split.train_classes[s];
    const auto& held = holdout.held[c];
    if (held.size() < cfg.query_per_class) {
      throw DataError("eval: class " + std::to_string(c) + " has " + std::to_string(held.size()) +
                      " held-out samples, need " + std::to_string(cfg.query_per_class));
    }
    ep.seen_slots.push_back(s);
    ep.seen_classes.push_back(c);
    for (auto i : detail::draw_without_replacement<std::size_t>(held, cfg.query_per_class, rng)) {
      ep.closed_query.push_back(i);
      ep.closed_labels.push_back(s);
    }
  }
  if (cfg.open_way > split.test_classes.size()) {
    throw DataError("eval: open_way " + std::to_string(cfg.open_way) + " exceeds " +
                    std::to_string(split.test_classes.size()) + " test classes");
  }
  ep.unseen_classes = detail::draw_without_replacement<std::size_t>(split.test_classes, cfg.open_way, rng);
  for (auto c : ep.unseen_classes) {
    const auto& members = ds.class_index[c];
    if (members.size() < cfg.open_query_per_class) {
      throw DataError("eval: unseen class " + std::to_string(c) + " has too few samples");
    }
    const auto drawn = detail::draw_without_replacement<std::size_t>(members, cfg.open_query_per_class, rng);
    ep.open_query.insert(ep.open_query.end(), drawn.begin(), drawn.end());
  }
  return ep;
}

// Runs n_episodes evaluation episodes on the test classes. Episode i draws
// from its own generator, so the report does not depend on the worker count.
inline AggregateReport evaluate(const Model& model, const LabeledDataset& ds, const ClassSplit& split,
                                const EvalSetup& setup, const SampleHoldout* holdout = nullptr) {
  if (setup.n_episodes < 1) throw ConfigError("evaluate: n_episodes must be >= 1");
  const bool large_scale = model.config.head.learned();
  if (large_scale) {
    if (!holdout) throw ConfigError("evaluate: large-scale model needs a sample holdout");
  } else {
    setup.episode.validate();
    const std::size_t need = setup.episode.way + setup.episode.open_way;
    if (split.test_classes.size() < need) {
      throw DataError("evaluate: " + std::to_string(split.test_classes.size()) + " test classes, need " +
                      std::to_string(need));
    }
  }

  std::vector<EvalEpisodeResult> results(setup.n_episodes);
  auto run_one = [&](std::size_t i) {
    Rng rng = derive_rng(setup.base_seed, Purpose::kEvalEpisode, i);
    const Episode ep = large_scale
                           ? sample_largescale_eval_episode(ds, split, *holdout, setup.episode, rng)
                           : sample_fewshot_episode(ds, split.test_classes, setup.episode, rng);
    results[i] = score_eval_episode(model, ds, ep, i);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(setup.workers, setup.n_episodes));
  if (workers == 1) {
    for (std::size_t i = 0; i < setup.n_episodes; ++i) run_one(i);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < setup.n_episodes; i += workers) run_one(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return aggregate(std::move(results));
}

}  // namespace peeler
