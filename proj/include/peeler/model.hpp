#pragma once

// Embedding networks and distance heads.
//
// The posterior over the N seen classes of an episode is
//   p(y = k | x) = softmax_k(-d(f(x), mu_k)),
// with d the squared Euclidean distance or the diagonal Mahalanobis distance
// sum_m A_k[m] (f(x)[m] - mu_k[m])^2. In the few-shot regime mu_k and A_k are
// estimated from the support set (class means of f and of g); in the
// large-scale regime they are per-class parameter tables, restricted to the
// classes seen in the current episode.
//
// Functions taking a network or model by reference are templates over its
// constness: a mutable object binds its tensors as trainable parameters, a
// const one binds them as constants.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "peeler/datasets.hpp"
#include "peeler/episodes.hpp"
#include "peeler/error.hpp"
#include "peeler/rng.hpp"
#include "peeler/tensor.hpp"

namespace peeler {

inline Var bind(Tape& tape, Tensor& t) { return tape.parameter(t); }
inline Var bind(Tape& tape, const Tensor& t) { return tape.constant(t); }

// Added after softplus so that every precision entry is strictly positive.
inline constexpr double kPrecisionEpsilon = 1e-6;

// ---------------------------------------------------------------------------
// Multilayer perceptron: affine/relu alternating, no activation after the last
// affine. Used for both the embedding f and the precision embedding g.

struct Mlp {
  std::vector<std::size_t> sizes;  // [d_in, h_1, ..., d_out]
  std::vector<Tensor> weights;     // [sizes[i], sizes[i+1]]
  std::vector<Tensor> biases;      // [sizes[i+1]]

  std::size_t in_dim() const { return sizes.front(); }
  std::size_t out_dim() const { return sizes.back(); }

  static Mlp zeros(std::vector<std::size_t> sizes) {
    if (sizes.size() < 2) throw ConfigError("mlp: need at least input and output sizes");
    Mlp net;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      if (sizes[i] == 0 || sizes[i + 1] == 0) throw ConfigError("mlp: zero-width layer");
      net.weights.push_back(Tensor::zeros({sizes[i], sizes[i + 1]}));
      net.biases.push_back(Tensor::zeros({sizes[i + 1]}));
    }
    net.sizes = std::move(sizes);
    return net;
  }

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  static Mlp init(std::vector<std::size_t> sizes, Rng& rng) {
    Mlp net = zeros(std::move(sizes));
    for (std::size_t i = 0; i < net.weights.size(); ++i) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(net.sizes[i]));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : net.weights[i].data()) v = u(rng);
      for (auto& v : net.biases[i].data()) v = u(rng);
    }
    return net;
  }
};

using EmbeddingNet = Mlp;
using PrecisionNet = Mlp;

template <typename Net>
  requires std::same_as<std::remove_const_t<Net>, Mlp>
Var embed(Tape& tape, Net& net, const Var& x) {
  if (x.shape().size() != 2 || x.shape()[1] != net.in_dim()) {
    throw ShapeError("embed: input " + shape_str(x.shape()) + " does not match network input width " +
                     std::to_string(net.in_dim()));
  }
  Var h = x;
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    h = affine(h, bind(tape, net.weights[i]), bind(tape, net.biases[i]));
    if (i + 1 < net.weights.size()) h = relu(h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Estimators and distances

// Class means of the support embeddings.
inline Var compute_prototypes(const Var& support_features, std::span<const std::size_t> labels, std::size_t n_classes) {
  return segment_mean(support_features, {labels.begin(), labels.end()}, n_classes);
}

// softplus(class mean of g outputs) + epsilon: diagonal precision per class.
inline Var compute_precisions(const Var& g_outputs, std::span<const std::size_t> labels, std::size_t n_classes) {
  return add_scalar(softplus(segment_mean(g_outputs, {labels.begin(), labels.end()}, n_classes)), kPrecisionEpsilon);
}

inline Var distance_euclidean(const Var& f, const Var& prototypes) { return squared_distance(f, prototypes); }

inline Var distance_mahalanobis(const Var& f, const Var& prototypes, const Var& precisions) {
  return mahalanobis_distance(f, prototypes, precisions);
}

struct Posterior {
  Var log_probs;              // [queries, classes]
  std::vector<double> scores; // max_k p_k per query
};

inline std::vector<double> max_probabilities(const Tensor& log_probs) {
  const std::size_t b = log_probs.rows(), c = log_probs.cols();
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    double m = log_probs[i * c];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, log_probs[i * c + j]);
    out[i] = std::exp(m);
  }
  return out;
}

inline Posterior posterior_from_logits(const Var& logits) {
  Posterior p;
  p.log_probs = log_softmax(logits);
  p.scores = max_probabilities(p.log_probs.value());
  return p;
}

// log p = log_softmax(-distances).
inline Posterior posteriors(const Var& distances) { return posterior_from_logits(scale(distances, -1.0)); }

// ---------------------------------------------------------------------------
// Heads

enum class HeadKind { kEuclidean, kMahalanobis, kLinear };
enum class PrototypeSource { kEstimated, kLearned };
enum class PrecisionSource { kIdentity, kEstimated, kLearned };

struct HeadConfig {
  HeadKind kind = HeadKind::kMahalanobis;
  PrototypeSource prototypes = PrototypeSource::kEstimated;
  PrecisionSource precision = PrecisionSource::kEstimated;

  bool learned() const { return prototypes == PrototypeSource::kLearned; }

  void validate() const {
    const bool identity = precision == PrecisionSource::kIdentity;
    if (kind == HeadKind::kLinear) {
      if (!learned() || !identity) throw ConfigError("head: linear baseline needs learned weights and no precision");
      return;
    }
    if ((kind == HeadKind::kEuclidean) != identity) {
      throw ConfigError("head: euclidean heads use identity precision and only they do");
    }
    if (!identity && (precision == PrecisionSource::kLearned) != learned()) {
      throw ConfigError("head: precisions must be learned exactly when prototypes are learned");
    }
  }

  // Canonical head for a regime.
  static HeadConfig for_regime(HeadKind kind, bool large_scale) {
    HeadConfig h;
    h.kind = kind;
    h.prototypes = large_scale ? PrototypeSource::kLearned : PrototypeSource::kEstimated;
    if (kind == HeadKind::kMahalanobis) {
      h.precision = large_scale ? PrecisionSource::kLearned : PrecisionSource::kEstimated;
    } else {
      h.precision = PrecisionSource::kIdentity;
    }
    return h;
  }
};

// Per-class parameter tables of the large-scale regime, [classes, embed_dim].
struct LearnedTables {
  Tensor prototypes;
  Tensor raw_precisions;  // mapped through softplus + epsilon before use
  Tensor linear_weights;  // baseline linear-softmax head, no bias
};

struct DistanceHead {
  HeadConfig config;
  std::shared_ptr<LearnedTables> shared_tables;
  std::vector<std::size_t> active;  // table rows visible through this head, in posterior order

  std::size_t width() const { return active.size(); }
  LearnedTables& tables() { return *shared_tables; }
  const LearnedTables& tables() const { return *shared_tables; }
};

// View of `head` over the given table rows. Shares the underlying tables, so
// gradients computed through the view reach the owning model.
inline DistanceHead restrict_to_seen(const DistanceHead& head, std::span<const std::size_t> seen) {
  if (seen.empty()) throw ConfigError("restrict_to_seen: empty class list");
  if (!head.config.learned()) throw ConfigError("restrict_to_seen: head has no learned class table");
  DistanceHead out{head.config, head.shared_tables, {}};
  for (auto c : seen) {
    if (std::find(head.active.begin(), head.active.end(), c) == head.active.end()) {
      throw ConfigError("restrict_to_seen: unknown class id " + std::to_string(c));
    }
    out.active.push_back(c);
  }
  return out;
}

// Scores queries against a learned head.
template <typename Head>
  requires std::same_as<std::remove_const_t<Head>, DistanceHead>
Posterior score_learned(Tape& tape, Head& head, const Var& queries) {
  auto& tables = head.tables();
  const std::vector<std::size_t> rows(head.active.begin(), head.active.end());
  switch (head.config.kind) {
    case HeadKind::kLinear:
      return posterior_from_logits(matmul_nt(queries, gather_rows(bind(tape, tables.linear_weights), rows)));
    case HeadKind::kEuclidean:
      return posteriors(distance_euclidean(queries, gather_rows(bind(tape, tables.prototypes), rows)));
    case HeadKind::kMahalanobis: {
      Var mu = gather_rows(bind(tape, tables.prototypes), rows);
      Var prec = add_scalar(softplus(gather_rows(bind(tape, tables.raw_precisions), rows)), kPrecisionEpsilon);
      return posteriors(distance_mahalanobis(queries, mu, prec));
    }
  }
  throw ConfigError("unknown head kind");
}

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t embed_dim = 16;
  HeadConfig head;
  std::size_t n_learned_classes = 0;  // rows of the learned tables (large-scale)

  std::vector<std::size_t> layer_sizes() const {
    std::vector<std::size_t> s{input_dim};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(embed_dim);
    return s;
  }
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

struct ConstNamedParam {
  std::string name;
  const Tensor* tensor;
};

struct Model {
  ModelConfig config;
  EmbeddingNet f;
  std::optional<PrecisionNet> g;  // present iff precisions are estimated
  DistanceHead head;

  // f, then g, then the learned tables, all from one generator.
  static Model init(const ModelConfig& cfg, Rng& rng) {
    cfg.head.validate();
    Model m;
    m.config = cfg;
    m.f = Mlp::init(cfg.layer_sizes(), rng);
    if (cfg.head.precision == PrecisionSource::kEstimated) m.g = Mlp::init(cfg.layer_sizes(), rng);
    m.head.config = cfg.head;
    m.head.shared_tables = std::make_shared<LearnedTables>();
    if (cfg.head.learned()) {
      if (cfg.n_learned_classes < 2) throw ConfigError("model: learned head needs at least 2 classes");
      const std::size_t c = cfg.n_learned_classes, d = cfg.embed_dim;
      std::normal_distribution<double> normal(0.0, 1.0);
      auto& t = m.head.tables();
      if (cfg.head.kind == HeadKind::kLinear) {
        t.linear_weights = Tensor::zeros({c, d});
        for (auto& v : t.linear_weights.data()) v = 0.01 * normal(rng);
      } else {
        t.prototypes = Tensor::zeros({c, d});
        for (auto& v : t.prototypes.data()) v = 0.01 * normal(rng);
        if (cfg.head.precision == PrecisionSource::kLearned) t.raw_precisions = Tensor::zeros({c, d});
      }
      m.head.active.resize(c);
      std::iota(m.head.active.begin(), m.head.active.end(), std::size_t{0});
    }
    return m;
  }

  // Copies own their learned tables; only restricted head views share them.
  Model() = default;
  Model(const Model& o) : config(o.config), f(o.f), g(o.g), head(o.head) {
    if (o.head.shared_tables) head.shared_tables = std::make_shared<LearnedTables>(*o.head.shared_tables);
  }
  Model& operator=(const Model& o) {
    if (this != &o) *this = Model(o);
    return *this;
  }
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  // Fixed order; names are stable checkpoint keys.
  std::vector<NamedParam> parameters() { return collect<NamedParam>(*this); }
  std::vector<ConstNamedParam> parameters() const { return collect<ConstNamedParam>(*this); }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor->zero_grad();
  }

 private:
  template <typename Out, typename Self>
  static std::vector<Out> collect(Self& self) {
    std::vector<Out> out;
    auto add_net = [&out](const std::string& prefix, auto& net) {
      for (std::size_t i = 0; i < net.weights.size(); ++i) {
        out.push_back({prefix + "." + std::to_string(i) + ".weight", &net.weights[i]});
        out.push_back({prefix + "." + std::to_string(i) + ".bias", &net.biases[i]});
      }
    };
    add_net("f", self.f);
    if (self.g) add_net("g", *self.g);
    if (!self.head.shared_tables) return out;
    auto& t = self.head.tables();
    if (t.prototypes.size()) out.push_back({"head.prototypes", &t.prototypes});
    if (t.raw_precisions.size()) out.push_back({"head.raw_precisions", &t.raw_precisions});
    if (t.linear_weights.size()) out.push_back({"head.linear_weights", &t.linear_weights});
    return out;
  }
};

struct EpisodeScores {
  Posterior closed;
  std::optional<Posterior> open;  // absent when the episode has no open queries
};

// Forward pass over one episode. Few-shot: prototypes (and precisions) are
// estimated from the support set. Large-scale: the learned head is restricted
// to the episode's seen classes.
template <typename M>
  requires std::same_as<std::remove_const_t<M>, Model>
EpisodeScores score_episode(Tape& tape, M& model, const LabeledDataset& ds, const Episode& ep) {
  const std::size_t n = ep.way();
  auto embed_rows = [&](const std::vector<std::size_t>& idx) {
    return embed(tape, model.f, tape.constant(ds.gather(idx)));
  };

  EpisodeScores out;
  if (model.config.head.learned()) {
    auto head = restrict_to_seen(model.head, ep.seen_slots);
    auto score = [&](const std::vector<std::size_t>& idx) {
      if constexpr (std::is_const_v<M>) {
        return score_learned(tape, std::as_const(head), embed_rows(idx));
      } else {
        return score_learned(tape, head, embed_rows(idx));
      }
    };
    out.closed = score(ep.closed_query);
    if (!ep.open_query.empty()) out.open = score(ep.open_query);
    return out;
  }

  if (ep.support.empty()) throw DataError("few-shot episode has an empty support set");
  Var protos = compute_prototypes(embed_rows(ep.support), ep.support_labels, n);
  std::optional<Var> precisions;
  if (model.config.head.kind == HeadKind::kMahalanobis) {
    if (!model.g) throw ConfigError("mahalanobis few-shot head requires a precision network");
    Var g_out = embed(tape, *model.g, tape.constant(ds.gather(ep.support)));
    precisions = compute_precisions(g_out, ep.support_labels, n);
  }
  auto score = [&](const std::vector<std::size_t>& idx) {
    Var q = embed_rows(idx);
    return posteriors(precisions ? distance_mahalanobis(q, protos, *precisions) : distance_euclidean(q, protos));
  };
  out.closed = score(ep.closed_query);
  if (!ep.open_query.empty()) out.open = score(ep.open_query);
  return out;
}

}  // namespace peeler
