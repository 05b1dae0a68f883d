#pragma once

// Retrieval-conditioned fusion, the one-hidden-layer tanh generator, and
// continual fine-tuning with an L2-to-anchor forgetting penalty.

#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "crag/core.hpp"
#include "crag/corpus.hpp"
#include "crag/retrieval.hpp"
#include "crag/tensor.hpp"

namespace crag {

struct FusionConfig {
  double attn_temperature = 1.0;
  double confidence_gate = 0.0;

  void validate() const {
    require(attn_temperature > 0.0, ErrorCode::InvariantViolation,
            "attn_temperature must be > 0");
    require(confidence_gate >= 0.0 && confidence_gate <= 1.0, ErrorCode::InvariantViolation,
            "confidence_gate must be in [0,1]");
  }
};

/// W1: hidden x input, W2: output x hidden. Input = query dim + entry dim.
struct GeneratorParams {
  Matrix<double> w1;
  Matrix<double> w2;

  std::size_t input_dim() const { return w1.cols; }
  std::size_t hidden() const { return w1.rows; }
  std::size_t output_dim() const { return w2.rows; }

  static GeneratorParams random(std::size_t input_dim, std::size_t hidden, std::size_t output_dim,
                                std::mt19937_64& rng, double scale = 0.3) {
    return {random_matrix(hidden, input_dim, scale, rng),
            random_matrix(output_dim, hidden, scale, rng)};
  }

  void validate() const {
    require(w2.cols == w1.rows, ErrorCode::InvariantViolation, "generator: W2 cols != hidden");
    require(all_finite(w1.data) && all_finite(w2.data), ErrorCode::InvariantViolation,
            "generator: non-finite weights");
  }

  bool operator==(const GeneratorParams&) const = default;
};

struct ContextVector {
  Vec values;
};

/// A retrieved item resolved against the corpus.
struct ResolvedItem {
  Vec embedding;
  double score = 0.0;
  double confidence = 1.0;
};

/// One training example with its retrieval already resolved.
struct ConditionedSample {
  Vec h;
  std::vector<ResolvedItem> items;
  Vec target;
};

inline std::vector<ResolvedItem> resolve(const RetrievedSet& retrieved, const Corpus& corpus) {
  std::vector<ResolvedItem> out;
  out.reserve(retrieved.items.size());
  for (const RetrievedItem& item : retrieved.items) {
    auto entry = corpus.find(item.id);
    require(entry.has_value(), ErrorCode::UnresolvedEntryId,
            "fuse: entry " + std::to_string(item.id) + " not in corpus");
    out.push_back({entry->embedding, item.score, 1.0 - entry->uncertainty});
  }
  return out;
}

/// concat(h, sum_i a_i e_i) with a = softmax(score / T) over confidence-gated
/// items. Scores are passed separately so they can carry derivatives.
template <typename S>
std::vector<S> fuse_values(const Vec& h, std::span<const ResolvedItem> items,
                           std::span<const S> scores, const FusionConfig& cfg) {
  require(items.size() == scores.size(), ErrorCode::DimensionMismatch, "fuse: score count");
  std::size_t dim = items.empty() ? h.size() : items.front().embedding.size();
  std::vector<S> out;
  out.reserve(h.size() + dim);
  for (double x : h) out.push_back(S(x));

  std::vector<std::size_t> gated;
  std::vector<S> gated_scores;
  for (std::size_t i = 0; i < items.size(); ++i) {
    require(items[i].embedding.size() == dim, ErrorCode::DimensionMismatch,
            "fuse: mixed embedding sizes");
    if (items[i].confidence >= cfg.confidence_gate) {
      gated.push_back(i);
      gated_scores.push_back(scores[i]);
    }
  }
  std::vector<S> pooled(dim, S(0.0));
  if (!gated.empty()) {
    std::vector<S> a = softmax(gated_scores, cfg.attn_temperature);
    for (std::size_t g = 0; g < gated.size(); ++g) {
      const Vec& e = items[gated[g]].embedding;
      for (std::size_t j = 0; j < dim; ++j) pooled[j] = pooled[j] + a[g] * S(e[j]);
    }
  }
  out.insert(out.end(), pooled.begin(), pooled.end());
  return out;
}

inline Vec fuse_values(const Vec& h, std::span<const ResolvedItem> items, const FusionConfig& cfg) {
  Vec scores;
  for (const auto& it : items) scores.push_back(it.score);
  return fuse_values<double>(h, items, std::span<const double>(scores), cfg);
}

inline ContextVector fuse(const Vec& h, const RetrievedSet& retrieved, const Corpus& corpus,
                          const FusionConfig& cfg) {
  cfg.validate();
  const auto items = resolve(retrieved, corpus);
  Vec values = fuse_values(h, items, cfg);
  // Output width is fixed by the corpus even when nothing is retrieved.
  if (items.empty()) values.resize(h.size() + corpus.config().dim, 0.0);
  return {std::move(values)};
}

template <typename S>
std::vector<S> generator_forward(const Matrix<S>& w1, const Matrix<S>& w2,
                                 const std::vector<S>& context) {
  require(w1.cols == context.size(), ErrorCode::DimensionMismatch,
          "generate: context width " + std::to_string(context.size()) + " vs W1 cols " +
              std::to_string(w1.cols));
  std::vector<S> hidden = matvec(w1, context);
  using std::tanh;
  for (S& z : hidden) z = tanh(z);
  return matvec(w2, hidden);
}

inline Vec generate(const Query& x, const RetrievedSet& retrieved, const Corpus& corpus,
                    const GeneratorParams& phi, const FusionConfig& cfg) {
  ContextVector c = fuse(x.embedding, retrieved, corpus, cfg);
  return generator_forward(phi.w1, phi.w2, c.values);
}

/// Squared L2 error.
inline double loss(const Vec& prediction, const Vec& target) {
  require(prediction.size() == target.size(), ErrorCode::DimensionMismatch,
          "loss: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double r = prediction[i] - target[i];
    s += r * r;
  }
  return s;
}

template <typename S>
struct GeneratorGradient {
  S loss{0.0};
  Matrix<S> w1;
  Matrix<S> w2;
};

/// Loss sum_i coef_i * ||G(c_i) - y_i||^2 and its gradient in (W1, W2), by
/// hand-written backprop. Samples are reduced in index order.
template <typename S>
GeneratorGradient<S> generator_gradient(const Matrix<S>& w1, const Matrix<S>& w2,
                                        const std::vector<std::vector<S>>& contexts,
                                        std::span<const Vec> targets, std::span<const double> coefs) {
  require(contexts.size() == targets.size() && targets.size() == coefs.size(),
          ErrorCode::DimensionMismatch, "generator_gradient: batch size mismatch");
  GeneratorGradient<S> g;
  g.w1 = Matrix<S>(w1.rows, w1.cols);
  g.w2 = Matrix<S>(w2.rows, w2.cols);
  using std::tanh;
  for (std::size_t n = 0; n < contexts.size(); ++n) {
    const std::vector<S>& c = contexts[n];
    require(c.size() == w1.cols, ErrorCode::DimensionMismatch, "generator_gradient: context");
    require(targets[n].size() == w2.rows, ErrorCode::DimensionMismatch,
            "generator_gradient: target");
    std::vector<S> z = matvec(w1, c);
    for (S& v : z) v = tanh(v);
    std::vector<S> y = matvec(w2, z);
    const S coef(coefs[n]);
    std::vector<S> r(y.size());
    for (std::size_t o = 0; o < y.size(); ++o) {
      const S diff = y[o] - S(targets[n][o]);
      g.loss = g.loss + coef * diff * diff;
      r[o] = S(2.0) * coef * diff;
    }
    std::vector<S> dz(z.size(), S(0.0));
    for (std::size_t o = 0; o < w2.rows; ++o) {
      for (std::size_t hdx = 0; hdx < w2.cols; ++hdx) {
        g.w2(o, hdx) = g.w2(o, hdx) + r[o] * z[hdx];
        dz[hdx] = dz[hdx] + w2(o, hdx) * r[o];
      }
    }
    for (std::size_t hdx = 0; hdx < w1.rows; ++hdx) {
      const S du = dz[hdx] * (S(1.0) - z[hdx] * z[hdx]);
      for (std::size_t i = 0; i < w1.cols; ++i) g.w1(hdx, i) = g.w1(hdx, i) + du * c[i];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Continual fine-tuning

struct FinetuneConfig {
  double lambda_reg = 0.0;
  double lr = 0.05;
  FusionConfig fusion;
};

inline double mean_confidence(const ConditionedSample& s) {
  if (s.items.empty()) return 0.0;
  double total = 0.0;
  for (const auto& it : s.items) total += it.confidence;
  return total / static_cast<double>(s.items.size());
}

/// Samples whose mean retrieval confidence clears the gate.
inline std::vector<const ConditionedSample*> select_samples(std::span<const ConditionedSample> batch,
                                                            double gate) {
  std::vector<const ConditionedSample*> kept;
  for (const auto& s : batch) {
    if (mean_confidence(s) >= gate) kept.push_back(&s);
  }
  return kept;
}

/// Objective value and gradient of mean task loss + lambda * ||phi - anchor||^2
/// over the selected samples.
inline GeneratorGradient<double> finetune_gradient(std::span<const ConditionedSample> batch,
                                                   const GeneratorParams& phi,
                                                   const GeneratorParams& anchor,
                                                   const FinetuneConfig& cfg) {
  require(cfg.lambda_reg >= 0.0, ErrorCode::InvalidArgument, "finetune: lambda_reg must be >= 0");
  const auto kept = select_samples(batch, cfg.fusion.confidence_gate);
  require(!kept.empty(), ErrorCode::EmptyBatchAfterSelection,
          "finetune: no sample passes confidence gate " +
              std::to_string(cfg.fusion.confidence_gate));
  std::vector<Vec> contexts;
  std::vector<Vec> targets;
  for (const ConditionedSample* s : kept) {
    contexts.push_back(fuse_values(s->h, s->items, cfg.fusion));
    targets.push_back(s->target);
  }
  const std::vector<double> coefs(kept.size(), 1.0 / static_cast<double>(kept.size()));
  auto g = generator_gradient<double>(phi.w1, phi.w2, contexts, targets, coefs);
  auto add_anchor = [&](Matrix<double>& grad, const Matrix<double>& p, const Matrix<double>& a) {
    require(p.rows == a.rows && p.cols == a.cols, ErrorCode::DimensionMismatch,
            "finetune: anchor shape");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = p.data[i] - a.data[i];
      g.loss += cfg.lambda_reg * d * d;
      grad.data[i] += 2.0 * cfg.lambda_reg * d;
    }
  };
  add_anchor(g.w1, phi.w1, anchor.w1);
  add_anchor(g.w2, phi.w2, anchor.w2);
  return g;
}

/// One gradient step. `anchor` is the parameter snapshot to stay close to.
inline GeneratorParams finetune_step(std::span<const ConditionedSample> batch,
                                     const GeneratorParams& phi, const GeneratorParams& anchor,
                                     const FinetuneConfig& cfg) {
  require(cfg.lr >= 0.0, ErrorCode::InvalidArgument, "finetune: lr must be >= 0");
  auto g = finetune_gradient(batch, phi, anchor, cfg);
  check_divergence(g.loss, "finetune_step");
  GeneratorParams next = phi;
  for (std::size_t i = 0; i < next.w1.size(); ++i) next.w1.data[i] -= cfg.lr * g.w1.data[i];
  for (std::size_t i = 0; i < next.w2.size(); ++i) next.w2.data[i] -= cfg.lr * g.w2.data[i];
  return next;
}

/// Mean squared error of the generator over conditioned samples, no gating.
inline double mean_task_loss(std::span<const ConditionedSample> batch, const GeneratorParams& phi,
                             const FusionConfig& fusion) {
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : batch) {
    total += loss(generator_forward(phi.w1, phi.w2, fuse_values(s.h, s.items, fusion)), s.target);
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace crag
