#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "peeler/error.hpp"
#include "peeler/model.hpp"
#include "peeler/tensor.hpp"

namespace peeler {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> m;  // keyed by parameter name
  std::map<std::string, std::vector<double>> v;
  std::uint64_t rejected_steps = 0;
};

enum class StepStatus { kApplied, kRejectedNonFinite };

// One Adam update from the grads held in each parameter. A non-finite gradient
// anywhere rejects the whole step: parameters and moments stay untouched.
inline StepStatus adam_step(std::span<const NamedParam> params, AdamState& state, double lr) {
  for (const auto& p : params) {
    if (p.tensor->grad().size() != p.tensor->size()) {
      throw ShapeError("adam_step: parameter " + p.name + " has no gradient of matching shape");
    }
    for (double g : p.tensor->grad()) {
      if (!std::isfinite(g)) {
        ++state.rejected_steps;
        return StepStatus::kRejectedNonFinite;
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& p : params) {
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    const std::size_t n = p.tensor->size();
    if (m.size() != n) m.assign(n, 0.0);
    if (v.size() != n) v.assign(n, 0.0);
    auto data = p.tensor->data();
    auto grad = p.tensor->grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      data[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
  return StepStatus::kApplied;
}

// Rescales all grads so their joint L2 norm is at most max_norm. Returns the
// norm before clipping.
inline double clip_grad_norm(std::span<const NamedParam> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.tensor->grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      for (double& g : p.tensor->grad()) g *= s;
  }
  return norm;
}

struct LrSchedule {
  std::vector<std::uint64_t> milestones;
  double factor = 0.1;

  void validate() const {
    for (std::size_t i = 1; i < milestones.size(); ++i) {
      if (milestones[i] <= milestones[i - 1]) throw ConfigError("lr schedule: milestones must be strictly increasing");
    }
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("lr schedule: factor must be in (0, 1)");
  }
};

// base_lr * factor^(number of milestones <= episode).
inline double lr_at(const LrSchedule& schedule, double base_lr, std::uint64_t episode) {
  double lr = base_lr;
  for (auto m : schedule.milestones) {
    if (m <= episode) lr *= schedule.factor;
  }
  return lr;
}

}  // namespace peeler
