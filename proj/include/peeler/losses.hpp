#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "peeler/error.hpp"
#include "peeler/tensor.hpp"

namespace peeler {

// How each loss term aggregates over its queries. Mean keeps lambda's meaning
// independent of the query counts; sum reproduces the literal objective.
enum class Reduction { kMean, kSum };

inline Var reduce(const Var& per_query, Reduction r) { return r == Reduction::kMean ? mean(per_query) : sum(per_query); }

// -log p[q, label_q], reduced over queries.
inline Var cross_entropy(const Var& log_probs, std::span<const std::size_t> labels,
                         Reduction reduction = Reduction::kMean) {
  if (log_probs.shape().size() != 2) throw ShapeError("cross_entropy: log_probs must be [queries, classes]");
  const std::size_t c = log_probs.shape()[1];
  for (auto l : labels) {
    if (l >= c) throw DataError("cross_entropy: label " + std::to_string(l) + " out of range for " + std::to_string(c) + " classes");
  }
  return scale(reduce(pick(log_probs, {labels.begin(), labels.end()}), reduction), -1.0);
}

// Negative entropy sum_k p_k log p_k per open query, reduced. Lies in
// [-log N, 0]; minimizing it flattens the seen-class posterior.
inline Var open_set_entropy_loss(const Var& log_probs, Reduction reduction = Reduction::kMean) {
  return reduce(neg_entropy_rows(log_probs), reduction);
}

struct LossBreakdown {
  Var total;  // differentiable
  double closed_ce = 0.0;
  double open_entropy_term = 0.0;  // 0 when there are no open queries
  double lambda = 0.0;
  double total_value = 0.0;
  bool has_open = false;
};

// total = cross_entropy(closed) + lambda * open_set_entropy_loss(open).
inline LossBreakdown combined_loss(const Var& closed_log_probs, std::span<const std::size_t> closed_labels,
                                   const std::optional<Var>& open_log_probs, double lambda,
                                   Reduction reduction = Reduction::kMean) {
  if (!(lambda >= 0.0)) throw ConfigError("combined_loss: lambda must be >= 0");
  LossBreakdown out;
  out.lambda = lambda;
  Var ce = cross_entropy(closed_log_probs, closed_labels, reduction);
  out.closed_ce = ce.item();
  out.total = ce;
  if (open_log_probs && open_log_probs->shape()[0] > 0) {
    Var lo = open_set_entropy_loss(*open_log_probs, reduction);
    out.has_open = true;
    out.open_entropy_term = lo.item();
    if (lambda != 0.0) out.total = add(ce, scale(lo, lambda));
  }
  out.total_value = out.total.item();
  return out;
}

}  // namespace peeler
