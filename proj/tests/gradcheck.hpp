#pragma once

// Finite-difference oracle for tests. The numeric side evaluates the loss on
// tapes that record no adjoints, so it shares only forward values with the
// analytic gradients it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "peeler/model.hpp"
#include "peeler/tensor.hpp"

namespace peeler::testing {

struct GradCheck {
  std::string name;
  double rel_error = 0.0;  // ||analytic - numeric|| / (||analytic|| + ||numeric||)
  double analytic_norm = 0.0;
};

inline double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  // The floor keeps an exactly-zero gradient (e.g. a term that cancels) from
  // being scored against pure finite-difference noise.
  const double denom = std::max(std::sqrt(na) + std::sqrt(nn), 1e-6);
  return std::sqrt(diff) / denom;
}

// Central differences d loss / d p[i] ~ (L(p + h e_i) - L(p - h e_i)) / 2h.
inline std::vector<double> numeric_gradient(const std::function<Var(Tape&)>& loss, Tensor& p, double h = 1e-5) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + h;
    double up = 0.0, down = 0.0;
    {
      Tape t(GradMode::kNone);
      up = loss(t).item();
    }
    p[i] = saved - h;
    {
      Tape t(GradMode::kNone);
      down = loss(t).item();
    }
    p[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline std::vector<GradCheck> check_gradients(const std::vector<NamedParam>& params,
                                              const std::function<Var(Tape&)>& loss, double h = 1e-5) {
  for (const auto& p : params) p.tensor->zero_grad();
  {
    Tape t;
    t.backward(loss(t));
  }
  std::vector<GradCheck> out;
  for (const auto& p : params) {
    std::vector<double> analytic(p.tensor->grad().begin(), p.tensor->grad().end());
    const auto numeric = numeric_gradient(loss, *p.tensor, h);
    double norm = 0.0;
    for (double v : analytic) norm += v * v;
    out.push_back({p.name, rel_error(analytic, numeric), std::sqrt(norm)});
  }
  return out;
}

inline double worst(const std::vector<GradCheck>& checks) {
  double w = 0.0;
  for (const auto& c : checks) w = std::max(w, c.rel_error);
  return w;
}

// Smallest |pre-activation| feeding any relu of `net` on the given inputs,
// computed with plain loops. Central differences are only meaningful when this
// exceeds the step.
inline double relu_margin(const Mlp& net, const Tensor& x) {
  double margin = INFINITY;
  std::vector<double> h(x.data().begin(), x.data().end());
  std::size_t width = x.cols();
  const std::size_t rows = x.rows();
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    const std::size_t out_w = net.sizes[l + 1];
    std::vector<double> next(rows * out_w, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_w; ++j) {
        double s = net.biases[l][j];
        for (std::size_t k = 0; k < width; ++k) s += h[r * width + k] * net.weights[l].at(k, j);
        if (l + 1 < net.weights.size()) {
          margin = std::min(margin, std::abs(s));
          s = s > 0.0 ? s : 0.0;
        }
        next[r * out_w + j] = s;
      }
    h = std::move(next);
    width = out_w;
  }
  return margin;
}

}  // namespace peeler::testing
