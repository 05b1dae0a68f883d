#pragma once

// Toy mixture of linear experts with a sparse softmax gate, trained as a
// bilevel problem: experts minimize the gate-weighted loss (lower level), the
// gate minimizes routing regularizers plus held-out task loss (upper level)
// through truncated unrolling of the expert updates.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "crag/core.hpp"
#include "crag/dual.hpp"
#include "crag/tensor.hpp"

namespace crag {

struct GatingParams {
  Matrix<double> wg;  // N x d logits
  std::size_t top_k = 1;

  std::size_t experts() const { return wg.rows; }

  void validate() const {
    require(top_k >= 1 && top_k <= wg.rows, ErrorCode::InvariantViolation,
            "gating: top_k must be in [1, N]");
  }

  bool operator==(const GatingParams&) const = default;
};

struct ExpertParams {
  std::vector<Matrix<double>> maps;  // each output x d

  void validate() const {
    require(!maps.empty(), ErrorCode::InvariantViolation, "experts: N must be >= 1");
    for (const auto& m : maps) {
      require(m.rows == maps.front().rows && m.cols == maps.front().cols,
              ErrorCode::InvariantViolation, "experts: inconsistent dimensions");
    }
  }

  bool operator==(const ExpertParams&) const = default;
};

struct RoutingConfig {
  double entropy_coef = 0.0;
  double balance_coef = 0.0;
  double sparsity_coef = 0.0;

  void validate() const {
    for (double c : {entropy_coef, balance_coef, sparsity_coef}) {
      require(std::isfinite(c) && c >= 0.0, ErrorCode::InvariantViolation,
              "routing coefficients must be finite and nonnegative");
    }
  }
};

struct MoeSample {
  Vec x;
  Vec y;
};

template <typename S>
std::vector<S> gate_logits(const Matrix<S>& wg, const Vec& x) {
  return matvec(wg, x);
}

/// Indices of the top_k largest values, ties to the lowest index.
inline std::vector<std::size_t> top_indices(const Vec& values, std::size_t top_k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  idx.resize(std::min(top_k, idx.size()));
  return idx;
}

/// Softmax, keep top_k, renormalize. The kept set is fixed by value, so the
/// derivative is that of the renormalized softmax on the kept coordinates.
template <typename S>
std::vector<S> sparse_gate(const std::vector<S>& logits, std::size_t top_k) {
  std::vector<S> p = softmax(logits);
  Vec pv;
  for (const S& v : p) pv.push_back(value_of(v));
  const auto keep = top_indices(pv, top_k);
  S total(0.0);
  for (std::size_t i : keep) total = total + p[i];
  std::vector<S> out(p.size(), S(0.0));
  for (std::size_t i : keep) out[i] = p[i] / total;
  return out;
}

inline Vec gate(const Vec& x, const GatingParams& g) {
  g.validate();
  return sparse_gate(gate_logits(g.wg, x), g.top_k);
}

namespace moe_detail {

template <typename S>
S expert_sq_error(const Matrix<S>& map, const Vec& x, const Vec& y) {
  std::vector<S> pred = matvec(map, x);
  S e(0.0);
  for (std::size_t o = 0; o < pred.size(); ++o) {
    const S r = pred[o] - S(y[o]);
    e = e + r * r;
  }
  return e;
}

}  // namespace moe_detail

/// mean_n sum_i gate(x_n)_i * ||E_i x_n - y_n||^2
template <typename G, typename E>
auto expert_loss_t(std::span<const MoeSample> batch, const Matrix<G>& wg, std::size_t top_k,
                   const std::vector<Matrix<E>>& experts) {
  using S = decltype(G() * E());
  S total(0.0);
  for (const MoeSample& s : batch) {
    const std::vector<G> g = sparse_gate(gate_logits(wg, s.x), top_k);
    for (std::size_t i = 0; i < experts.size(); ++i) {
      total = total + S(g[i]) * S(moe_detail::expert_sq_error(experts[i], s.x, s.y));
    }
  }
  return total / S(static_cast<double>(std::max<std::size_t>(batch.size(), 1)));
}

inline double expert_loss(std::span<const MoeSample> batch, const GatingParams& g,
                          const ExpertParams& e) {
  g.validate();
  e.validate();
  require(g.experts() == e.maps.size(), ErrorCode::DimensionMismatch, "gate/expert count");
  double total = 0.0;
  for (const MoeSample& s : batch) {
    const Vec w = gate(s.x, g);
    for (std::size_t i = 0; i < e.maps.size(); ++i) {
      if (w[i] == 0.0) continue;
      total += w[i] * moe_detail::expert_sq_error(e.maps[i], s.x, s.y);
    }
  }
  return batch.empty() ? 0.0 : total / static_cast<double>(batch.size());
}

/// Top-1 assignment fractions f_i.
inline Vec top1_fractions(std::span<const MoeSample> batch, const Matrix<double>& wg) {
  Vec f(wg.rows, 0.0);
  for (const MoeSample& s : batch) {
    const Vec logits = gate_logits(wg, s.x);
    f[top_indices(logits, 1).front()] += 1.0;
  }
  for (double& v : f) v /= static_cast<double>(std::max<std::size_t>(batch.size(), 1));
  return f;
}

/// Components of the routing regularizer, before coefficients.
template <typename S>
struct RoutingTerms {
  S neg_entropy{0.0};  // -mean entropy of the dense softmax
  S balance{0.0};      // N * sum_i f_i p_i
  S sparsity{0.0};     // mean L1 of the dense softmax
};

template <typename S>
RoutingTerms<S> routing_terms(std::span<const MoeSample> batch, const Matrix<S>& wg) {
  RoutingTerms<S> t;
  const std::size_t n_experts = wg.rows;
  if (batch.empty()) return t;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const Vec f = top1_fractions(batch, values_of(wg));
  std::vector<S> p_mean(n_experts, S(0.0));
  using std::log;
  for (const MoeSample& s : batch) {
    const std::vector<S> p = softmax(gate_logits(wg, s.x));
    S entropy(0.0);
    S l1(0.0);
    for (std::size_t i = 0; i < n_experts; ++i) {
      if (value_of(p[i]) > 0.0) entropy = entropy - p[i] * log(p[i]);
      l1 = l1 + p[i];
      p_mean[i] = p_mean[i] + p[i] * S(inv_n);
    }
    t.neg_entropy = t.neg_entropy - entropy * S(inv_n);
    t.sparsity = t.sparsity + l1 * S(inv_n);
  }
  for (std::size_t i = 0; i < n_experts; ++i) t.balance = t.balance + S(f[i]) * p_mean[i];
  t.balance = t.balance * S(static_cast<double>(n_experts));
  return t;
}

template <typename S>
S routing_loss_t(std::span<const MoeSample> batch, const Matrix<S>& wg, const RoutingConfig& cfg) {
  const RoutingTerms<S> t = routing_terms(batch, wg);
  return S(cfg.entropy_coef) * t.neg_entropy + S(cfg.balance_coef) * t.balance +
         S(cfg.sparsity_coef) * t.sparsity;
}

inline double routing_loss(std::span<const MoeSample> batch, const GatingParams& g,
                           const RoutingConfig& cfg) {
  cfg.validate();
  return routing_loss_t<double>(batch, g.wg, cfg);
}

/// Held-out task loss of the dense-softmax mixture sum_i p_i(x) E_i x.
template <typename G, typename E>
auto mixture_task_loss_t(std::span<const MoeSample> batch, const Matrix<G>& wg,
                         const std::vector<Matrix<E>>& experts) {
  using S = decltype(G() * E());
  S total(0.0);
  for (const MoeSample& s : batch) {
    const std::vector<G> p = softmax(gate_logits(wg, s.x));
    std::vector<S> pred(experts.front().rows, S(0.0));
    for (std::size_t i = 0; i < experts.size(); ++i) {
      const std::vector<E> out = matvec(experts[i], s.x);
      for (std::size_t o = 0; o < pred.size(); ++o) pred[o] = pred[o] + S(p[i]) * S(out[o]);
    }
    for (std::size_t o = 0; o < pred.size(); ++o) {
      const S r = pred[o] - S(s.y[o]);
      total = total + r * r;
    }
  }
  return total / S(static_cast<double>(std::max<std::size_t>(batch.size(), 1)));
}

/// Gradient of expert_loss with respect to every expert map, in scalar type S.
template <typename S>
std::vector<Matrix<S>> expert_gradient(std::span<const MoeSample> batch, const Matrix<S>& wg,
                                       std::size_t top_k, const std::vector<Matrix<S>>& experts) {
  std::vector<Matrix<S>> grads;
  for (const auto& m : experts) grads.emplace_back(m.rows, m.cols);
  const S inv_n(1.0 / static_cast<double>(std::max<std::size_t>(batch.size(), 1)));
  for (const MoeSample& s : batch) {
    const std::vector<S> g = sparse_gate(gate_logits(wg, s.x), top_k);
    for (std::size_t i = 0; i < experts.size(); ++i) {
      if (value_of(g[i]) == 0.0) continue;
      const std::vector<S> pred = matvec(experts[i], s.x);
      for (std::size_t o = 0; o < pred.size(); ++o) {
        const S r = S(2.0) * g[i] * (pred[o] - S(s.y[o])) * inv_n;
        for (std::size_t c = 0; c < s.x.size(); ++c) {
          grads[i](o, c) = grads[i](o, c) + r * S(s.x[c]);
        }
      }
    }
  }
  return grads;
}

struct MoeSolverConfig {
  std::size_t outer_steps = 200;
  std::size_t inner_steps = 5;
  std::size_t unroll_depth = 5;
  double lr_inner = 0.5;
  double lr_outer = 0.5;
  /// Every `holdout_every`-th sample goes to the upper-level split.
  std::size_t holdout_every = 4;
};

struct MoeTraceRecord {
  std::size_t step = 0;
  double routing_loss = 0.0;
  double expert_loss = 0.0;
  double upper_loss = 0.0;
};

struct MoeResult {
  GatingParams gating;
  ExpertParams experts;
  std::vector<MoeTraceRecord> trace;
};

namespace moe_detail {

inline void split(std::span<const MoeSample> data, std::size_t every, std::vector<MoeSample>& train,
                  std::vector<MoeSample>& held) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (every > 1 && i % every == every - 1) {
      held.push_back(data[i]);
    } else {
      train.push_back(data[i]);
    }
  }
  if (held.empty()) held = train;
}

template <typename S>
void expert_descent(std::span<const MoeSample> train, const Matrix<S>& wg, std::size_t top_k,
                    std::vector<Matrix<S>>& experts, double lr, std::size_t steps) {
  for (std::size_t t = 0; t < steps; ++t) {
    auto grads = expert_gradient(train, wg, top_k, experts);
    for (std::size_t i = 0; i < experts.size(); ++i) {
      for (std::size_t j = 0; j < experts[i].size(); ++j) {
        experts[i].data[j] = experts[i].data[j] - S(lr) * grads[i].data[j];
      }
    }
  }
}

}  // namespace moe_detail

/// Upper objective and its hypergradient in the gate, differentiating through
/// the last `unroll` expert steps. `experts` is advanced by `inner_steps`.
struct MoeHypergradient {
  double objective = 0.0;
  double routing = 0.0;
  double upper = 0.0;
  Vec gradient;  // row-major over wg
};

inline MoeHypergradient moe_hypergradient(std::span<const MoeSample> train,
                                          std::span<const MoeSample> held,
                                          const GatingParams& gating, ExpertParams& experts,
                                          const RoutingConfig& cfg, std::size_t inner_steps,
                                          std::size_t unroll, double lr_inner) {
  using D = Dual<double>;
  unroll = std::min(unroll, inner_steps);
  moe_detail::expert_descent<double>(train, gating.wg, gating.top_k, experts.maps, lr_inner,
                                     inner_steps - unroll);
  const std::size_t n = gating.wg.size();
  Matrix<D> wg(gating.wg.rows, gating.wg.cols);
  for (std::size_t i = 0; i < n; ++i) wg.data[i] = D::variable(gating.wg.data[i], i, n);
  std::vector<Matrix<D>> maps;
  for (const auto& m : experts.maps) maps.push_back(m.cast<D>());
  moe_detail::expert_descent<D>(train, wg, gating.top_k, maps, lr_inner, unroll);

  const D r = routing_loss_t<D>(train, wg, cfg);
  const D u = mixture_task_loss_t(held, wg, maps);
  const D total = r + u;
  for (std::size_t i = 0; i < maps.size(); ++i) experts.maps[i] = values_of(maps[i]);

  MoeHypergradient out;
  out.objective = total.value();
  out.routing = r.value();
  out.upper = u.value();
  out.gradient.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.gradient[i] = total.partial(i);
  return out;
}

inline MoeResult bilevel_train_moe(std::span<const MoeSample> dataset, const GatingParams& gating0,
                                   const ExpertParams& experts0, const RoutingConfig& cfg,
                                   const MoeSolverConfig& solver) {
  require(!dataset.empty(), ErrorCode::InvalidArgument, "bilevel_train_moe: empty dataset");
  gating0.validate();
  experts0.validate();
  cfg.validate();
  require(gating0.experts() == experts0.maps.size(), ErrorCode::DimensionMismatch,
          "gate/expert count");
  std::vector<MoeSample> train;
  std::vector<MoeSample> held;
  moe_detail::split(dataset, solver.holdout_every, train, held);

  MoeResult result{gating0, experts0, {}};
  for (std::size_t step = 0; step < solver.outer_steps; ++step) {
    auto hg = moe_hypergradient(train, held, result.gating, result.experts, cfg,
                                solver.inner_steps, solver.unroll_depth, solver.lr_inner);
    const double el = expert_loss(train, result.gating, result.experts);
    check_divergence(el, "moe expert");
    check_divergence(hg.objective, "moe upper");
    for (std::size_t i = 0; i < hg.gradient.size(); ++i) {
      result.gating.wg.data[i] -= solver.lr_outer * hg.gradient[i];
    }
    result.trace.push_back({step, hg.routing, el, hg.upper});
  }
  return result;
}

/// Share of samples routed (top-1) to their cluster's majority expert.
inline double routing_purity(std::span<const MoeSample> data, std::span<const std::size_t> cluster,
                             const GatingParams& g) {
  require(data.size() == cluster.size(), ErrorCode::DimensionMismatch, "purity: label count");
  if (data.empty()) return 0.0;
  const std::size_t n_clusters = *std::max_element(cluster.begin(), cluster.end()) + 1;
  std::vector<Vec> counts(n_clusters, Vec(g.experts(), 0.0));
  for (std::size_t i = 0; i < data.size(); ++i) {
    counts[cluster[i]][top_indices(gate_logits(g.wg, data[i].x), 1).front()] += 1.0;
  }
  double hits = 0.0;
  for (const Vec& c : counts) hits += *std::max_element(c.begin(), c.end());
  return hits / static_cast<double>(data.size());
}

}  // namespace crag
