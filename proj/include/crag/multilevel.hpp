#pragma once

// End-to-end retriever/generator optimization:
//  * bilevel: generator steps on the training loss (lower), retriever
//    hypergradient steps on the validation loss (upper);
//  * trilevel: an innermost KL-constrained domain-weight problem reweights
//    the generator's training loss;
//  * timescale reductions that freeze components and solve the remaining
//    single-level or bilevel subproblem.
// The top-K selection is recomputed at every outer step and held fixed while
// differentiating; gradients flow through the scores into the attention
// weights of the fusion.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "crag/core.hpp"
#include "crag/corpus.hpp"
#include "crag/dro.hpp"
#include "crag/dual.hpp"
#include "crag/fusion.hpp"
#include "crag/moe.hpp"
#include "crag/nested.hpp"
#include "crag/retrieval.hpp"
#include "crag/tensor.hpp"

namespace crag {

struct ModelState {
  RetrieverParams retriever;
  GeneratorParams generator;
  GatingParams gating;
  ExpertParams experts;
  DomainWeights weights;
  Tick version = 0;

  void validate() const {
    retriever.validate();
    generator.validate();
    if (gating.experts() > 0) gating.validate();
    if (!experts.maps.empty()) experts.validate();
    double total = 0.0;
    for (double w : weights.w) {
      require(w >= 0.0, ErrorCode::InvariantViolation, "domain weights must be nonnegative");
      total += w;
    }
    require(weights.w.empty() || std::abs(total - 1.0) <= 1e-9, ErrorCode::InvariantViolation,
            "domain weights must sum to 1");
  }

  bool operator==(const ModelState&) const = default;
};

struct RagSample {
  Query query;
  Vec target;
  std::size_t domain = 0;
};

struct RagContext {
  const Corpus* corpus = nullptr;
  Tick now = 0;
  std::size_t k = 2;
  FusionConfig fusion;
  RetrievalOptions options;
};

/// Which retriever parameters receive gradient.
struct RetrieverMask {
  bool alpha = true;
  bool projection = true;
};

struct RagSolverConfig {
  SolverConfig solver{.outer_steps = 30, .inner_steps = 5, .unroll_depth = 3, .lr = {0.05, 0.1}};
  RetrieverMask mask;
};

struct RagTraceRecord {
  std::size_t step = 0;
  std::size_t level = 0;  // 1 retriever, 2 generator, 3 domain weights
  double objective = 0.0;
  Vec w;
  Vec domain_losses;

  bool operator==(const RagTraceRecord&) const = default;
};

struct RagResult {
  ModelState state;
  std::vector<RagTraceRecord> trace;
};

namespace rag_detail {

/// A sample with its retrieval selection fixed and resolved.
struct Prepared {
  const RagSample* sample = nullptr;
  std::vector<ResolvedItem> items;
  Vec rel_fresh;
};

inline std::vector<Prepared> prepare(std::span<const RagSample> samples,
                                     const RetrieverParams& theta, const RagContext& ctx) {
  require(ctx.corpus != nullptr, ErrorCode::InvalidArgument, "rag: context has no corpus");
  std::vector<Prepared> out;
  out.reserve(samples.size());
  for (const RagSample& s : samples) {
    Query q = s.query;
    q.tick = ctx.now;
    const RetrievedSet set = retrieve_topk(q, ctx.k, *ctx.corpus, theta, ctx.options);
    Prepared p{&s, {}, {}};
    for (const RetrievedItem& item : set.items) {
      const auto entry = ctx.corpus->find(item.id);
      p.items.push_back({entry->embedding, item.score, 1.0 - entry->uncertainty});
      p.rel_fresh.push_back(task_relevance(*entry, q.task) *
                            ctx.corpus->freshness(*entry, std::max(ctx.now, entry->created_at)));
    }
    out.push_back(std::move(p));
  }
  return out;
}

template <typename S>
struct ThetaT {
  S alpha;
  Matrix<S> projection;
};

/// Seeds the unmasked retriever parameters as derivative directions.
template <typename D>
ThetaT<D> seed_theta(const RetrieverParams& theta, const RetrieverMask& mask, std::size_t& n) {
  n = (mask.alpha ? 1 : 0) + (mask.projection ? theta.projection.size() : 0);
  ThetaT<D> t{D(theta.alpha), theta.projection.cast<D>()};
  std::size_t idx = 0;
  if (mask.alpha) t.alpha = D::variable(theta.alpha, idx++, n);
  if (mask.projection) {
    for (std::size_t i = 0; i < theta.projection.size(); ++i) {
      t.projection.data[i] = D::variable(theta.projection.data[i], idx++, n);
    }
  }
  return t;
}

inline void apply_theta_step(RetrieverParams& theta, const RetrieverMask& mask, const Vec& grad,
                             double lr) {
  std::size_t idx = 0;
  if (mask.alpha) theta.alpha = std::clamp(theta.alpha - lr * grad[idx++], 0.0, 1.0);
  if (mask.projection) {
    for (double& p : theta.projection.data) p -= lr * grad[idx++];
  }
}

template <typename S>
std::vector<std::vector<S>> contexts(std::span<const Prepared> prepared, const ThetaT<S>& theta,
                                     const FusionConfig& fusion) {
  std::vector<std::vector<S>> out;
  out.reserve(prepared.size());
  for (const Prepared& p : prepared) {
    std::vector<S> scores;
    scores.reserve(p.items.size());
    for (std::size_t i = 0; i < p.items.size(); ++i) {
      scores.push_back(blended_score<S>(p.sample->query.embedding, p.items[i].embedding,
                                        theta.alpha, theta.projection, p.rel_fresh[i]));
    }
    out.push_back(fuse_values<S>(p.sample->query.embedding, p.items,
                                 std::span<const S>(scores), fusion));
  }
  return out;
}

inline std::vector<Vec> targets(std::span<const Prepared> prepared) {
  std::vector<Vec> out;
  for (const Prepared& p : prepared) out.push_back(p.sample->target);
  return out;
}

template <typename S>
S weighted_loss(const Matrix<S>& w1, const Matrix<S>& w2, const std::vector<std::vector<S>>& ctx,
                std::span<const Vec> tgt, std::span<const double> coefs) {
  S total(0.0);
  for (std::size_t n = 0; n < ctx.size(); ++n) {
    const std::vector<S> y = generator_forward(w1, w2, ctx[n]);
    for (std::size_t o = 0; o < y.size(); ++o) {
      const S r = y[o] - S(tgt[n][o]);
      total = total + S(coefs[n]) * r * r;
    }
  }
  return total;
}

inline std::size_t domain_count(std::span<const RagSample> samples) {
  std::size_t m = 0;
  for (const RagSample& s : samples) m = std::max(m, s.domain + 1);
  return m;
}

/// Per-sample coefficient w_m / |D_m|.
inline Vec domain_coefs(std::span<const RagSample> samples, const Vec& w) {
  Vec counts(w.size(), 0.0);
  for (const RagSample& s : samples) counts[s.domain] += 1.0;
  Vec coefs;
  coefs.reserve(samples.size());
  for (const RagSample& s : samples) coefs.push_back(w[s.domain] / counts[s.domain]);
  return coefs;
}

inline Vec uniform_coefs(std::size_t n) { return Vec(n, 1.0 / static_cast<double>(n)); }

/// Mean loss per domain at the given parameters.
inline Vec domain_losses(std::span<const Prepared> prepared, const RetrieverParams& theta,
                         const GeneratorParams& phi, const FusionConfig& fusion, std::size_t m) {
  const ThetaT<double> t{theta.alpha, theta.projection};
  const auto ctx = contexts<double>(prepared, t, fusion);
  Vec sum(m, 0.0);
  Vec count(m, 0.0);
  for (std::size_t n = 0; n < prepared.size(); ++n) {
    const std::size_t d = prepared[n].sample->domain;
    sum[d] += loss(generator_forward(phi.w1, phi.w2, ctx[n]), prepared[n].sample->target);
    count[d] += 1.0;
  }
  for (std::size_t d = 0; d < m; ++d) sum[d] = count[d] > 0.0 ? sum[d] / count[d] : 0.0;
  return sum;
}

inline void generator_descent(std::span<const Prepared> prepared, const RetrieverParams& theta,
                              GeneratorParams& phi, const FusionConfig& fusion,
                              std::span<const double> coefs, double lr, std::size_t steps) {
  if (steps == 0) return;
  const ThetaT<double> t{theta.alpha, theta.projection};
  const auto ctx = contexts<double>(prepared, t, fusion);
  const auto tgt = targets(prepared);
  for (std::size_t s = 0; s < steps; ++s) {
    auto g = generator_gradient<double>(phi.w1, phi.w2, ctx, tgt, coefs);
    check_divergence(g.loss, "generator");
    for (std::size_t i = 0; i < phi.w1.size(); ++i) phi.w1.data[i] -= lr * g.w1.data[i];
    for (std::size_t i = 0; i < phi.w2.size(); ++i) phi.w2.data[i] -= lr * g.w2.data[i];
  }
}

}  // namespace rag_detail

/// Validation objective and its hypergradient in the retriever parameters.
struct RagHypergradient {
  double objective = 0.0;
  double train_objective = 0.0;
  Vec gradient;  // alpha first (if unmasked), then row-major projection
};

/// Runs `inner_steps` generator steps on the weighted training loss, the last
/// `unroll_depth` of them differentiated with respect to the retriever, then
/// evaluates the mean validation loss. `phi` is advanced in place.
inline RagHypergradient rag_hypergradient(std::span<const RagSample> train,
                                          std::span<const RagSample> val,
                                          const RetrieverParams& theta, GeneratorParams& phi,
                                          std::span<const double> coefs, const RagContext& ctx,
                                          const RagSolverConfig& cfg) {
  using D = Dual<double>;
  using namespace rag_detail;
  const auto prep_train = prepare(train, theta, ctx);
  const auto prep_val = prepare(val, theta, ctx);
  const double lr_phi = cfg.solver.lr_at(1);
  const std::size_t unroll = std::min(cfg.solver.unroll_depth, cfg.solver.inner_steps);
  generator_descent(prep_train, theta, phi, ctx.fusion, coefs, lr_phi,
                    cfg.solver.inner_steps - unroll);

  std::size_t n = 0;
  const ThetaT<D> t = seed_theta<D>(theta, cfg.mask, n);
  const auto ctx_train = contexts<D>(prep_train, t, ctx.fusion);
  const auto tgt_train = targets(prep_train);
  Matrix<D> w1 = phi.w1.cast<D>();
  Matrix<D> w2 = phi.w2.cast<D>();
  double train_obj = 0.0;
  for (std::size_t s = 0; s < unroll; ++s) {
    auto g = generator_gradient<D>(w1, w2, ctx_train, tgt_train, coefs);
    train_obj = value_of(g.loss);
    check_divergence(train_obj, "generator");
    for (std::size_t i = 0; i < w1.size(); ++i) w1.data[i] = w1.data[i] - D(lr_phi) * g.w1.data[i];
    for (std::size_t i = 0; i < w2.size(); ++i) w2.data[i] = w2.data[i] - D(lr_phi) * g.w2.data[i];
  }
  const auto ctx_val = contexts<D>(prep_val, t, ctx.fusion);
  const auto tgt_val = targets(prep_val);
  const Vec val_coefs = uniform_coefs(prep_val.size());
  const D f = weighted_loss<D>(w1, w2, ctx_val, tgt_val, val_coefs);
  check_divergence(f.value(), "validation");

  phi.w1 = values_of(w1);
  phi.w2 = values_of(w2);
  RagHypergradient out;
  out.objective = f.value();
  out.train_objective = train_obj;
  out.gradient.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.gradient[i] = f.partial(i);
  return out;
}

/// Gradient of sum_i coef_i * loss_i in the retriever with the generator frozen.
inline RagHypergradient retriever_gradient(std::span<const RagSample> samples,
                                           std::span<const double> coefs,
                                           const ModelState& state, const RagContext& ctx,
                                           const RetrieverMask& mask = {}) {
  using D = Dual<double>;
  using namespace rag_detail;
  const auto prep = prepare(samples, state.retriever, ctx);
  std::size_t n = 0;
  const ThetaT<D> t = seed_theta<D>(state.retriever, mask, n);
  const auto c = contexts<D>(prep, t, ctx.fusion);
  const auto tgt = targets(prep);
  const D f = weighted_loss<D>(state.generator.w1.cast<D>(), state.generator.w2.cast<D>(), c, tgt,
                               coefs);
  RagHypergradient out;
  out.objective = f.value();
  out.gradient.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.gradient[i] = f.partial(i);
  return out;
}

/// One single-level retriever step on the mean loss of `samples`.
inline ModelState retriever_step(std::span<const RagSample> samples, const ModelState& state,
                                 const RagContext& ctx, double lr,
                                 const RetrieverMask& mask = {}) {
  if (samples.empty()) return state;
  const Vec coefs = rag_detail::uniform_coefs(samples.size());
  const auto g = retriever_gradient(samples, coefs, state, ctx, mask);
  check_divergence(g.objective, "retriever");
  ModelState next = state;
  rag_detail::apply_theta_step(next.retriever, mask, g.gradient, lr);
  return next;
}

namespace rag_detail {

/// Shared bilevel/trilevel loop. `weights_for` maps per-domain losses to w.
template <typename WeightFn>
RagResult rag_loop(std::span<const RagSample> train, std::span<const RagSample> val,
                   const ModelState& state, const RagSolverConfig& cfg, const RagContext& ctx,
                   WeightFn weights_for) {
  require(!train.empty() && !val.empty(), ErrorCode::InvalidArgument,
          "rag solver: train and val must be nonempty");
  require(ctx.corpus != nullptr && ctx.corpus->size() > 0, ErrorCode::InvalidArgument,
          "rag solver: corpus must be nonempty");
  cfg.solver.validate();
  const std::size_t m = domain_count(train);
  RagResult result{state, {}};
  ModelState& s = result.state;
  for (std::size_t step = 0; step < cfg.solver.outer_steps; ++step) {
    const auto prep_train = prepare(train, s.retriever, ctx);
    const Vec losses = domain_losses(prep_train, s.retriever, s.generator, ctx.fusion, m);
    const DomainWeights w = weights_for(losses);
    double weighted = 0.0;
    for (std::size_t d = 0; d < m; ++d) weighted += w.w[d] * losses[d];
    result.trace.push_back({step, 3, weighted, w.w, losses});
    s.weights = w;

    const Vec coefs = domain_coefs(train, w.w);
    auto hg = rag_hypergradient(train, val, s.retriever, s.generator, coefs, ctx, cfg);
    result.trace.push_back({step, 2, hg.train_objective, w.w, losses});
    result.trace.push_back({step, 1, hg.objective, w.w, losses});
    apply_theta_step(s.retriever, cfg.mask, hg.gradient, cfg.solver.lr_at(0));
  }
  ++s.version;
  return result;
}

}  // namespace rag_detail

/// Bilevel retriever/generator optimization with uniform domain weights.
inline RagResult solve_bilevel_rag(std::span<const RagSample> train,
                                   std::span<const RagSample> val, const ModelState& state,
                                   const RagSolverConfig& cfg, const RagContext& ctx) {
  const DomainWeights base = state.weights;
  return rag_detail::rag_loop(train, val, state, cfg, ctx, [&](const Vec& losses) {
    return DomainWeights::uniform(losses.size(), base.epsilon, base.sense);
  });
}

inline std::vector<RagSample> flatten_domains(std::span<const std::vector<RagSample>> domains) {
  std::vector<RagSample> flat;
  for (std::size_t m = 0; m < domains.size(); ++m) {
    for (RagSample s : domains[m]) {
      s.domain = m;
      flat.push_back(std::move(s));
    }
  }
  return flat;
}

/// Trilevel: domain weights from the KL-constrained problem (state.weights
/// carries epsilon and sense), generator on the weighted loss, retriever on
/// validation. The weights enter the hypergradient as constants.
inline RagResult solve_trilevel(std::span<const std::vector<RagSample>> domains,
                                std::span<const RagSample> val, const ModelState& state,
                                const RagSolverConfig& cfg, const RagContext& ctx) {
  require(domains.size() >= 2, ErrorCode::InvalidArgument, "solve_trilevel: need M >= 2");
  for (const auto& d : domains) {
    require(!d.empty(), ErrorCode::InvalidArgument, "solve_trilevel: empty domain");
  }
  const std::vector<RagSample> train = flatten_domains(domains);
  const double epsilon = state.weights.epsilon;
  const DroSense sense = state.weights.sense;
  return rag_detail::rag_loop(train, val, state, cfg, ctx, [&](const Vec& losses) {
    return solve_dro_weights(losses, epsilon, sense);
  });
}

// ---------------------------------------------------------------------------
// Timescale reductions

enum class Reduction { RetrieverOnly, RetrieverAndWeights, Full };

inline std::string_view to_string(Reduction r) {
  switch (r) {
    case Reduction::RetrieverOnly: return "retriever_only";
    case Reduction::RetrieverAndWeights: return "retriever_and_weights";
    case Reduction::Full: return "full";
  }
  return "full";
}

struct SolverPlan {
  Reduction which = Reduction::Full;
  bool update_retriever = true;
  bool update_generator = true;
  bool update_weights = true;
  std::size_t levels = 3;
};

inline SolverPlan reduce_problem(const ModelState&, Reduction which) {
  switch (which) {
    case Reduction::RetrieverOnly: return {which, true, false, false, 1};
    case Reduction::RetrieverAndWeights: return {which, true, false, true, 2};
    case Reduction::Full: return {which, true, true, true, 3};
  }
  return {};
}

/// Executes a reduced plan. Frozen components are returned untouched.
///  * retriever_only: descent on the validation loss in the retriever.
///  * retriever_and_weights: w from the KL ball at the current per-domain
///    losses, then a retriever step on the w-weighted training loss (for the
///    worst-case sense this is the gradient of the max, by Danskin).
///  * full: solve_trilevel.
inline RagResult run_plan(const SolverPlan& plan, std::span<const std::vector<RagSample>> domains,
                          std::span<const RagSample> val, const ModelState& state,
                          const RagSolverConfig& cfg, const RagContext& ctx) {
  if (plan.which == Reduction::Full) return solve_trilevel(domains, val, state, cfg, ctx);
  const std::vector<RagSample> train = flatten_domains(domains);
  const std::size_t m = domains.size();
  RagResult result{state, {}};
  ModelState& s = result.state;
  for (std::size_t step = 0; step < cfg.solver.outer_steps; ++step) {
    if (plan.which == Reduction::RetrieverOnly) {
      const Vec coefs = rag_detail::uniform_coefs(val.size());
      const auto g = retriever_gradient(val, coefs, s, ctx, cfg.mask);
      check_divergence(g.objective, "retriever");
      result.trace.push_back({step, 1, g.objective, s.weights.w, {}});
      rag_detail::apply_theta_step(s.retriever, cfg.mask, g.gradient, cfg.solver.lr_at(0));
    } else {
      const auto prep = rag_detail::prepare(train, s.retriever, ctx);
      const Vec losses =
          rag_detail::domain_losses(prep, s.retriever, s.generator, ctx.fusion, m);
      s.weights = solve_dro_weights(losses, state.weights.epsilon, state.weights.sense);
      const Vec coefs = rag_detail::domain_coefs(train, s.weights.w);
      const auto g = retriever_gradient(train, coefs, s, ctx, cfg.mask);
      check_divergence(g.objective, "retriever");
      result.trace.push_back({step, 2, g.objective, s.weights.w, losses});
      rag_detail::apply_theta_step(s.retriever, cfg.mask, g.gradient, cfg.solver.lr_at(0));
    }
  }
  ++s.version;
  return result;
}

}  // namespace crag
