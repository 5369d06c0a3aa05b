#pragma once

// Episodic training for both regimes.
//
// Each episode: sample (few-shot: support + closed/open queries from the
// training classes; large-scale: a balanced batch with M classes drawn as
// unseen), score the queries, combine cross-entropy on the closed queries with
// lambda times the open-set entropy term, backpropagate, and take one Adam
// step at the scheduled learning rate. Only query losses produce gradients;
// the support set enters through the prototype and precision estimates.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "peeler/config.hpp"
#include "peeler/datasets.hpp"
#include "peeler/episodes.hpp"
#include "peeler/error.hpp"
#include "peeler/losses.hpp"
#include "peeler/model.hpp"
#include "peeler/optim.hpp"
#include "peeler/rng.hpp"

namespace peeler {

// Data shared by training and evaluation of one run.
struct Workspace {
  LabeledDataset data;
  ClassSplit split;
  std::optional<SampleHoldout> holdout;  // large-scale only
};

inline Workspace prepare_workspace(const TrainConfig& cfg) {
  cfg.validate();
  Workspace ws;
  ws.data = cfg.data == "synthetic" ? generate_gaussian_mixture(cfg.synthetic)
                                    : load_delimited(cfg.data, cfg.delimiter_char());
  ws.split = split_classes(ws.data, cfg.split, cfg.split_seed, cfg.allow_empty_split);
  if (cfg.large_scale()) ws.holdout = holdout_samples(ws.data, cfg.holdout, cfg.split_seed);
  return ws;
}

struct RunningStats {
  std::uint64_t count = 0;
  double sum_total = 0.0;
  double sum_closed_ce = 0.0;
  double sum_open = 0.0;
  std::uint64_t rejected_steps = 0;
};

struct TrainLoopState {
  std::uint64_t episode = 0;  // episodes completed
  Model model;
  AdamState adam;
  std::uint64_t base_seed = 0;
  RunningStats stats;
};

struct TrainRecord {
  std::uint64_t episode = 0;  // 1-based count of completed episodes
  double lr = 0.0;
  double closed_ce = 0.0;
  double open_entropy_term = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  double wall_time = 0.0;  // seconds since train() started
};

struct TrainHooks {
  std::function<void(const TrainRecord&)> on_log;
  std::function<void(const TrainLoopState&)> on_checkpoint;
  std::function<void(std::uint64_t episode)> on_rejected_step;
};

inline TrainLoopState init_train_state(const TrainConfig& cfg, const Workspace& ws) {
  TrainLoopState s;
  s.base_seed = cfg.seed;
  Rng rng = derive_rng(cfg.seed, Purpose::kInit);
  s.model = Model::init(cfg.model_config(ws.data.dim(), ws.split.train_classes.size()), rng);
  return s;
}

inline Episode sample_train_episode(const TrainConfig& cfg, const Workspace& ws, std::uint64_t index) {
  Rng rng = derive_rng(cfg.seed, Purpose::kTrainEpisode, index);
  if (cfg.large_scale()) {
    return sample_largescale_batch(ws.data, ws.split.train_classes, cfg.episode.open_way, cfg.batch_per_class, rng,
                                   &ws.holdout->train);
  }
  return sample_fewshot_episode(ws.data, ws.split.train_classes, cfg.episode, rng);
}

// Loss of the model on one episode, recorded on `tape`.
inline LossBreakdown episode_loss(Tape& tape, Model& model, const LabeledDataset& ds, const Episode& ep,
                                  double lambda, Reduction reduction) {
  const auto scores = score_episode(tape, model, ds, ep);
  std::optional<Var> open;
  if (scores.open) open = scores.open->log_probs;
  return combined_loss(scores.closed.log_probs, ep.closed_labels, open, lambda, reduction);
}

// Runs one episode and updates the state. Throws NumericError on a non-finite
// loss, naming the episode and its generator seed.
inline LossBreakdown train_step(TrainLoopState& state, const TrainConfig& cfg, const Workspace& ws,
                                const TrainHooks& hooks = {}) {
  const std::uint64_t e = state.episode;
  Episode ep;
  try {
    ep = sample_train_episode(cfg, ws, e);
  } catch (const DataError& err) {
    throw DataError("training episode " + std::to_string(e) + ": " + err.what());
  }
  Tape tape;
  state.model.zero_grad();
  auto loss = episode_loss(tape, state.model, ws.data, ep, cfg.lambda, cfg.reduction);
  if (!std::isfinite(loss.total_value)) {
    throw NumericError("non-finite loss at episode " + std::to_string(e) + " (base seed " +
                       std::to_string(cfg.seed) + ", episode stream index " + std::to_string(e) + ")");
  }
  tape.backward(loss.total);
  const auto params = state.model.parameters();
  if (cfg.clip_norm > 0.0) clip_grad_norm(params, cfg.clip_norm);
  if (adam_step(params, state.adam, lr_at(cfg.schedule, cfg.lr, e)) == StepStatus::kRejectedNonFinite) {
    ++state.stats.rejected_steps;
    if (hooks.on_rejected_step) hooks.on_rejected_step(e);
  }
  state.episode = e + 1;
  state.stats.count += 1;
  state.stats.sum_total += loss.total_value;
  state.stats.sum_closed_ce += loss.closed_ce;
  state.stats.sum_open += loss.open_entropy_term;
  return loss;
}

// Trains from state.episode up to cfg.episodes.
inline void train(TrainLoopState& state, const TrainConfig& cfg, const Workspace& ws, const TrainHooks& hooks = {}) {
  const auto start = std::chrono::steady_clock::now();
  while (state.episode < cfg.episodes) {
    const std::uint64_t e = state.episode;
    const auto loss = train_step(state, cfg, ws, hooks);
    const std::uint64_t done = state.episode;
    if (hooks.on_log && (done % cfg.log_every == 0 || done == cfg.episodes)) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      hooks.on_log({done, lr_at(cfg.schedule, cfg.lr, e), loss.closed_ce, loss.open_entropy_term, loss.lambda,
                    loss.total_value, wall});
    }
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.episodes) {
      hooks.on_checkpoint(state);
    }
  }
}

}  // namespace peeler
