#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "peeler/checkpoint.hpp"
#include "peeler/losses.hpp"
#include "peeler/optim.hpp"
#include "peeler/train.hpp"

using namespace peeler;

namespace {

constexpr double kLn5 = 1.609437912434100374600759;
constexpr double kLn4 = 1.386294361119890618834464;
constexpr double kLn2 = 0.6931471805599453094172321;

Tensor log_of(std::vector<std::vector<double>> probs) {
  Tensor t = Tensor::matrix(probs);
  for (auto& v : t.data()) v = v > 0 ? std::log(v) : -INFINITY;
  return t;
}

Tensor random_logits(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t = Tensor::zeros({rows, cols});
  for (auto& v : t.data()) v = n(rng);
  return t;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.synthetic = {.n_classes = 12, .dim = 4, .samples_per_class = 40, .within_std = 0.3, .seed = 2};
  c.hidden = {8};
  c.embed_dim = 4;
  c.episode = {3, 1, 4, 2, 4};
  c.eval_episode = {3, 1, 4, 2, 4};
  c.episodes = 40;
  c.schedule.milestones = {20, 30};
  c.eval_episodes = 10;
  c.log_every = 10;
  return c;
}

}  // namespace

TEST(CrossEntropy, Examples) {
  Tape t;
  const std::vector<std::size_t> l0{0};
  EXPECT_NEAR(cross_entropy(t.constant(log_of({{.2, .2, .2, .2, .2}})), l0).item(), kLn5, 1e-12);
  EXPECT_EQ(cross_entropy(t.constant(log_of({{1, 0, 0}})), l0).item(), 0.0);
  EXPECT_NEAR(cross_entropy(t.constant(log_of({{.25, .75}})), l0).item(), kLn4, 1e-12);
  const std::vector<std::size_t> bad{3};
  EXPECT_THROW(cross_entropy(t.constant(log_of({{.5, .5}})), bad), DataError);
}

TEST(OpenSetEntropy, Examples) {
  Tape t;
  auto lp = [&](Tensor x) { return log_softmax(t.constant(std::move(x))); };
  EXPECT_NEAR(open_set_entropy_loss(lp(Tensor::matrix({{0, 0, 0, 0, 0}}))).item(), -kLn5, 1e-12);
  EXPECT_EQ(open_set_entropy_loss(lp(Tensor::matrix({{0, -2000, -2000}}))).item(), 0.0);
  EXPECT_NEAR(open_set_entropy_loss(t.constant(log_of({{.5, .5, 0, 0, 0}}))).item(), -kLn2, 1e-12);
}

TEST(OpenSetEntropy, BoundsOnRandomPosteriors) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + trial % 9;
    Tape t;
    const double scale = std::pow(10.0, trial % 5 - 1);
    const auto logits = t.constant(random_logits(rng, 6, n, scale));
    const auto lp = log_softmax(logits);
    const double lo = open_set_entropy_loss(lp).item();
    EXPECT_GE(lo, -std::log(static_cast<double>(n)) - 1e-12);
    EXPECT_LE(lo, 0.0);
    std::vector<std::size_t> labels(6, trial % n);
    EXPECT_GE(cross_entropy(lp, labels).item(), 0.0);
  }
}

// One small descent step on the entropy term alone flattens the open queries'
// posteriors, lowering their mean max probability.
TEST(OpenSetEntropy, DescentLowersMaxProbability) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor q = random_logits(rng, 5, 3, 1.0);
    const Tensor mu = random_logits(rng, 4, 3, 1.0);
    auto mean_score = [&](const Tensor& x) {
      Tape t;
      const auto s = posteriors(distance_euclidean(t.constant(x), t.constant(mu))).scores;
      return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    };
    Tape t;
    t.backward(open_set_entropy_loss(posteriors(distance_euclidean(t.parameter(q), t.constant(mu))).log_probs));
    const double before = mean_score(q);
    Tensor stepped = q;
    for (std::size_t i = 0; i < q.size(); ++i) stepped[i] -= 1e-4 * q.grad()[i];
    EXPECT_LE(mean_score(stepped), before + 1e-15) << "trial " << trial;
  }
}

TEST(CombinedLoss, Examples) {
  Tape t;
  const std::vector<std::size_t> labels{2};
  const auto uniform = t.constant(log_of({{.2, .2, .2, .2, .2}}));
  const auto both = combined_loss(uniform, labels, uniform, 0.5);
  EXPECT_NEAR(both.total_value, 0.8047189562170501873003797, 1e-12);
  EXPECT_TRUE(both.has_open);

  const auto none = combined_loss(uniform, labels, std::nullopt, 0.5);
  EXPECT_EQ(none.total_value, none.closed_ce);
  EXPECT_FALSE(none.has_open);

  const auto zero = combined_loss(uniform, labels, uniform, 0.0);
  EXPECT_EQ(zero.total_value, zero.closed_ce);
  EXPECT_THROW(combined_loss(uniform, labels, uniform, -1.0), ConfigError);
}

TEST(CombinedLoss, SumReductionScalesWithQueries) {
  Tape t;
  const std::vector<std::size_t> labels{0, 1, 2};
  const auto lp = t.constant(log_of({{.2, .2, .2, .2, .2}, {.2, .2, .2, .2, .2}, {.2, .2, .2, .2, .2}}));
  EXPECT_NEAR(combined_loss(lp, labels, lp, 0.5, Reduction::kSum).total_value, 3 * 0.5 * kLn5, 1e-12);
}

// ---------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor w = Tensor::vector({1.0, -2.0});
  w.zero_grad();
  AdamState s;
  const std::vector<NamedParam> p{{"w", &w}};
  adam_step(p, s, 1e-3);
  EXPECT_EQ(w, Tensor::vector({1.0, -2.0}));
}

TEST(Adam, FirstStepMagnitude) {
  Tensor w = Tensor::scalar(0.0);
  w.zero_grad();
  w.grad()[0] = 1.0;
  AdamState s;
  const std::vector<NamedParam> p{{"w", &w}};
  adam_step(p, s, 0.001);
  EXPECT_NEAR(w[0], -0.001 / (1.0 + 1e-8), 1e-18);
}

TEST(Adam, MatchesHandRolledRecurrence) {
  Tensor w = Tensor::scalar(0.5);
  AdamState s;
  const std::vector<NamedParam> p{{"w", &w}};
  double x = 0.5, m = 0.0, v = 0.0;
  const double g = 0.3, lr = 0.01;
  for (int k = 1; k <= 2; ++k) {
    w.zero_grad();
    w.grad()[0] = g;
    adam_step(p, s, lr);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= lr * (m / (1 - std::pow(0.9, k))) / (std::sqrt(v / (1 - std::pow(0.999, k))) + 1e-8);
    EXPECT_NEAR(w[0], x, 1e-12);
  }
}

TEST(Adam, ZeroLearningRateOnlyMovesState) {
  std::mt19937_64 rng(1);
  Tensor w = random_logits(rng, 3, 3, 1.0);
  const Tensor before = w;
  AdamState s;
  const std::vector<NamedParam> p{{"w", &w}};
  for (int k = 0; k < 5; ++k) {
    w.zero_grad();
    for (auto& g : w.grad()) g = std::normal_distribution<double>(0, 1)(rng);
    adam_step(p, s, 0.0);
  }
  EXPECT_EQ(w, before);
  EXPECT_EQ(s.step, 5u);
  EXPECT_NE(s.m["w"][0], 0.0);
}

TEST(Adam, NonFiniteGradientRejectsStep) {
  Tensor w = Tensor::vector({1.0, 2.0});
  w.zero_grad();
  w.grad()[1] = NAN;
  AdamState s;
  const std::vector<NamedParam> p{{"w", &w}};
  EXPECT_EQ(adam_step(p, s, 0.1), StepStatus::kRejectedNonFinite);
  EXPECT_EQ(w, Tensor::vector({1.0, 2.0}));
  EXPECT_EQ(s.step, 0u);
  EXPECT_EQ(s.rejected_steps, 1u);
}

TEST(Schedule, PaperMilestones) {
  const LrSchedule sched{{10000, 20000}, 0.1};
  EXPECT_NEAR(lr_at(sched, 1e-3, 9999), 1e-3, 1e-3 * 1e-12);
  EXPECT_NEAR(lr_at(sched, 1e-3, 10000), 1e-4, 1e-4 * 1e-12);
  EXPECT_NEAR(lr_at(sched, 1e-3, 20000), 1e-5, 1e-5 * 1e-12);
}

TEST(Schedule, NonIncreasing) {
  const LrSchedule sched{{3, 7, 8, 20}, 0.5};
  double prev = INFINITY;
  for (std::uint64_t e = 0; e < 40; ++e) {
    const double lr = lr_at(sched, 0.1, e);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_THROW((LrSchedule{{5, 5}, 0.1}.validate()), ConfigError);
}

TEST(ClipGradNorm, RescalesJointNorm) {
  Tensor a = Tensor::vector({3.0}), b = Tensor::vector({4.0});
  a.zero_grad();
  b.zero_grad();
  a.grad()[0] = 3.0;
  b.grad()[0] = 4.0;
  const std::vector<NamedParam> p{{"a", &a}, {"b", &b}};
  EXPECT_DOUBLE_EQ(clip_grad_norm(p, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
}

// ---------------------------------------------------------------------------

TEST(Train, SameSeedGivesIdenticalCheckpoint) {
  const auto cfg = tiny_config();
  const auto ws = prepare_workspace(cfg);
  auto run = [&] {
    auto s = init_train_state(cfg, ws);
    train(s, cfg, ws);
    return checkpoint_to_string(cfg, s);
  };
  EXPECT_EQ(run(), run());
}

TEST(Train, ResumeIsExact) {
  auto cfg = tiny_config();
  const auto ws = prepare_workspace(cfg);
  auto straight = init_train_state(cfg, ws);
  train(straight, cfg, ws);

  auto first = init_train_state(cfg, ws);
  std::string saved;
  TrainHooks hooks;
  cfg.checkpoint_every = 15;
  hooks.on_checkpoint = [&](const TrainLoopState& s) {
    if (s.episode == 15) saved = checkpoint_to_string(cfg, s);
  };
  train(first, cfg, ws, hooks);
  ASSERT_FALSE(saved.empty());

  auto ck = checkpoint_from_string(saved);
  EXPECT_EQ(ck.state.episode, 15u);
  train(ck.state, ck.config, ws);
  EXPECT_EQ(checkpoint_to_string(ck.config, ck.state), checkpoint_to_string(ck.config, straight));
  const auto a = straight.model.parameters(), b = ck.state.model.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].tensor, *b[i].tensor) << a[i].name;
}

TEST(Train, LargeScaleRunsAndResumes) {
  auto cfg = tiny_config();
  cfg.mode = Mode::kLargeScale;
  cfg.split = {0.5, 0.0, 0.5};
  cfg.batch_per_class = 3;
  cfg.episode.open_way = 2;
  cfg.eval_episode = {3, 1, 4, 2, 4};
  const auto ws = prepare_workspace(cfg);
  auto straight = init_train_state(cfg, ws);
  train(straight, cfg, ws);
  EXPECT_EQ(straight.stats.count, cfg.episodes);
  EXPECT_TRUE(std::isfinite(straight.stats.sum_total));

  auto part = init_train_state(cfg, ws);
  auto half = cfg;
  half.episodes = 17;
  train(part, half, ws);
  auto ck = checkpoint_from_string(checkpoint_to_string(cfg, part));
  train(ck.state, cfg, ws);
  EXPECT_EQ(checkpoint_to_string(cfg, ck.state), checkpoint_to_string(cfg, straight));
}

TEST(Train, LogsAtIntervalsAndEnd) {
  auto cfg = tiny_config();
  cfg.episodes = 25;
  const auto ws = prepare_workspace(cfg);
  auto s = init_train_state(cfg, ws);
  std::vector<std::uint64_t> logged;
  std::vector<double> lrs;
  TrainHooks hooks;
  hooks.on_log = [&](const TrainRecord& r) {
    logged.push_back(r.episode);
    lrs.push_back(r.lr);
  };
  train(s, cfg, ws, hooks);
  EXPECT_EQ(logged, (std::vector<std::uint64_t>{10, 20, 25}));
  EXPECT_DOUBLE_EQ(lrs[0], 1e-3);
  EXPECT_NEAR(lrs[2], 1e-4, 1e-18);
}

TEST(Checkpoint, RejectsTamperedConfig) {
  const auto cfg = tiny_config();
  const auto ws = prepare_workspace(cfg);
  auto s = init_train_state(cfg, ws);
  auto text = checkpoint_to_string(cfg, s);
  const auto pos = text.find("lambda = ");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 12, "lambda = 0.9");
  EXPECT_THROW(checkpoint_from_string(text), DataError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  auto cfg = tiny_config();
  cfg.episodes = 5;
  const auto ws = prepare_workspace(cfg);
  auto s = init_train_state(cfg, ws);
  train(s, cfg, ws);
  const auto text = checkpoint_to_string(cfg, s);
  const auto ck = checkpoint_from_string(text);
  EXPECT_EQ(checkpoint_to_string(ck.config, ck.state), text);
  EXPECT_EQ(ck.config_hash, config_hash(cfg));
}
