#pragma once

// Generic nested (up to three level) optimization by recursive truncated
// unrolling. Level k takes projected gradient steps on its objective while
// differentiating through the responses of levels k+1..K, which are re-solved
// for `inner_steps` steps inside every step of level k.
//
// Objectives and projections are supplied as generic callables; the problem
// instantiates them for every scalar type the recursion needs (double and up
// to three nested duals).

#include <cmath>
#include <functional>
#include <string>
#include <tuple>
#include <type_traits>
#include <vector>

#include "crag/core.hpp"
#include "crag/dual.hpp"

namespace crag {

using D1 = Dual<double>;
using D2 = Dual<D1>;
using D3 = Dual<D2>;

template <typename S>
using Vars = std::vector<std::vector<S>>;

inline constexpr std::size_t kMaxNestedLevels = 3;

struct SolverConfig {
  std::size_t outer_steps = 100;
  std::size_t inner_steps = 20;
  std::size_t unroll_depth = 3;
  /// Learning rate per level, outermost first; the last value repeats.
  std::vector<double> lr{0.1};
  /// Early stop when the outermost step norm drops below this (0 disables).
  double tolerance = 0.0;
  std::uint64_t seed = 0;

  double lr_at(std::size_t level) const {
    require(!lr.empty(), ErrorCode::InvalidArgument, "solver: no learning rates");
    return lr[std::min(level, lr.size() - 1)];
  }

  void validate() const {
    require(outer_steps >= 1 && inner_steps >= 1 && unroll_depth >= 1,
            ErrorCode::InvariantViolation, "solver: step counts must be >= 1");
    require(!lr.empty(), ErrorCode::InvariantViolation, "solver: lr list empty");
    for (double v : lr) require(v > 0.0, ErrorCode::InvariantViolation, "solver: lr must be > 0");
  }
};

class NestedLevel {
 public:
  template <typename S>
  using Objective = std::function<S(const Vars<S>&)>;
  template <typename S>
  using Projection = std::function<void(std::vector<S>&, const Vars<S>&)>;

  /// `objective` must be callable as S(const Vars<S>&) for every scalar S.
  /// `projection` as void(std::vector<S>& x_k, const Vars<S>& all).
  template <typename F>
  NestedLevel(Vec init, F objective) : init_(std::move(init)) {
    set_objective(objective);
  }

  template <typename F, typename P>
  NestedLevel(Vec init, F objective, P projection) : init_(std::move(init)) {
    set_objective(objective);
    std::get<0>(projections_) = projection;
    std::get<1>(projections_) = projection;
    std::get<2>(projections_) = projection;
  }

  std::size_t dim() const { return init_.size(); }
  const Vec& init() const { return init_; }

  template <typename S>
  S eval(const Vars<S>& x) const {
    return std::get<Objective<S>>(objectives_)(x);
  }

  template <typename S>
  void project(std::vector<S>& xk, const Vars<S>& all) const {
    if constexpr (std::is_same_v<S, D3>) {
      return;
    } else {
      const auto& p = std::get<Projection<S>>(projections_);
      if (p) p(xk, all);
    }
  }

 private:
  template <typename F>
  void set_objective(const F& f) {
    std::get<0>(objectives_) = f;
    std::get<1>(objectives_) = f;
    std::get<2>(objectives_) = f;
    std::get<3>(objectives_) = f;
  }

  Vec init_;
  std::tuple<Objective<double>, Objective<D1>, Objective<D2>, Objective<D3>> objectives_;
  std::tuple<Projection<double>, Projection<D1>, Projection<D2>> projections_;
};

struct NestedProblem {
  std::vector<NestedLevel> levels;  // outermost first

  void validate() const {
    require(!levels.empty(), ErrorCode::InvariantViolation, "nested: K must be >= 1");
    require(levels.size() <= kMaxNestedLevels, ErrorCode::InvalidArgument,
            "nested: at most 3 levels supported");
  }
};

struct NestedTraceRecord {
  std::size_t step = 0;
  std::size_t level = 0;
  double objective = 0.0;
};

struct NestedResult {
  Vars<double> x;
  std::vector<NestedTraceRecord> trace;
};

namespace nested_detail {

template <typename T, typename S>
Vars<T> lift_vars(const Vars<S>& x) {
  Vars<T> out;
  out.reserve(x.size());
  for (const auto& level : x) {
    std::vector<T> v;
    v.reserve(level.size());
    for (const S& s : level) v.push_back(T(s));
    out.push_back(std::move(v));
  }
  return out;
}

template <std::size_t Depth, typename S>
void level_update(const NestedProblem& p, Vars<S>& x, const SolverConfig& cfg);

/// Total derivative of F_Depth in x_Depth through `inner_steps` re-solves of
/// the lower levels. Lower levels of `x` are advanced in place.
template <std::size_t Depth, typename S>
std::vector<S> level_gradient(const NestedProblem& p, Vars<S>& x, const SolverConfig& cfg) {
  using D = Dual<S>;
  const NestedLevel& level = p.levels[Depth];
  const std::size_t n = level.dim();
  Vars<D> xd = lift_vars<D>(x);
  for (std::size_t i = 0; i < n; ++i) xd[Depth][i] = D::variable(x[Depth][i], i, n);
  if constexpr (Depth + 1 < kMaxNestedLevels) {
    if (Depth + 1 < p.levels.size()) {
      for (std::size_t s = 0; s < cfg.inner_steps; ++s) level_update<Depth + 1, D>(p, xd, cfg);
    }
  }
  const D f = level.eval<D>(xd);
  check_divergence(value_of(f), "nested level " + std::to_string(Depth));
  for (std::size_t j = Depth + 1; j < p.levels.size(); ++j) {
    for (std::size_t i = 0; i < x[j].size(); ++i) x[j][i] = xd[j][i].value();
  }
  std::vector<S> grad(n);
  for (std::size_t i = 0; i < n; ++i) grad[i] = f.partial(i);
  return grad;
}

template <std::size_t Depth, typename S>
void level_update(const NestedProblem& p, Vars<S>& x, const SolverConfig& cfg) {
  std::vector<S> grad = level_gradient<Depth, S>(p, x, cfg);
  const S lr(cfg.lr_at(Depth));
  for (std::size_t i = 0; i < grad.size(); ++i) x[Depth][i] = x[Depth][i] - lr * grad[i];
  p.levels[Depth].project<S>(x[Depth], x);
}

inline Vars<double> initial_vars(const NestedProblem& p) {
  Vars<double> x;
  for (const auto& level : p.levels) x.push_back(level.init());
  return x;
}

}  // namespace nested_detail

/// Re-solves levels 1..K-1 for `inner_steps` steps with x_0 held fixed.
inline void solve_lower_levels(const NestedProblem& p, Vars<double>& x, const SolverConfig& cfg) {
  if (p.levels.size() < 2) return;
  for (std::size_t s = 0; s < cfg.inner_steps; ++s) {
    nested_detail::level_update<1, double>(p, x, cfg);
  }
}

/// Hypergradient of the outermost objective at x_0; lower levels of `x` are
/// advanced as in one outer step.
inline Vec nested_hypergradient(const NestedProblem& p, Vars<double>& x, const SolverConfig& cfg) {
  p.validate();
  return nested_detail::level_gradient<0, double>(p, x, cfg);
}

inline NestedResult solve_nested(const NestedProblem& p, const SolverConfig& cfg) {
  p.validate();
  cfg.validate();
  NestedResult result{nested_detail::initial_vars(p), {}};
  Vars<double>& x = result.x;
  for (std::size_t step = 0; step < cfg.outer_steps; ++step) {
    const Vec before = x[0];
    nested_detail::level_update<0, double>(p, x, cfg);
    for (std::size_t k = 0; k < p.levels.size(); ++k) {
      const double f = p.levels[k].eval<double>(x);
      check_divergence(f, "nested level " + std::to_string(k));
      result.trace.push_back({step, k, f});
    }
    double moved = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      moved += (x[0][i] - before[i]) * (x[0][i] - before[i]);
    }
    if (cfg.tolerance > 0.0 && std::sqrt(moved) < cfg.tolerance) break;
  }
  solve_lower_levels(p, x, cfg);
  return result;
}

}  // namespace crag
