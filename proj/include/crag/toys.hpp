#pragma once

// Small fixed-seed problems for the solver demos and tests.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "crag/corpus.hpp"
#include "crag/moe.hpp"
#include "crag/multilevel.hpp"
#include "crag/nested.hpp"

namespace crag {

// ---------------------------------------------------------------------------
// Retrieval-augmented regression over M domains.

struct RagToyConfig {
  std::uint64_t seed = 0;
  std::size_t dim = 8;
  std::size_t domains = 2;
  std::size_t samples_per_domain = 12;
  std::size_t val_per_domain = 6;
  std::size_t entries_per_domain = 3;
  std::size_t hidden = 8;
  std::size_t output_dim = 2;
  std::size_t k = 2;
  double spread = 0.2;
  /// Label noise standard deviation per domain; missing entries are 0.
  std::vector<double> label_noise;
  double alpha = 0.7;
};

struct RagToy {
  std::unique_ptr<Corpus> corpus;
  std::vector<std::vector<RagSample>> domains;
  std::vector<RagSample> val;
  ModelState state;
  std::size_t k = 2;

  RagContext context() const { return {corpus.get(), 0, k, {}, {}}; }
  std::vector<RagSample> train() const { return flatten_domains(domains); }
};

inline RagToy make_rag_toy(const RagToyConfig& c) {
  require(c.domains >= 1 && c.dim >= 2, ErrorCode::InvalidArgument, "rag toy: bad shape");
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto unit = [&](const Vec& center, double spread) {
    Vec v(c.dim);
    for (std::size_t i = 0; i < c.dim; ++i) {
      v[i] = (center.empty() ? 0.0 : center[i]) + spread * normal(rng);
    }
    return normalized(v);
  };

  CorpusConfig cc;
  cc.dim = c.dim;
  cc.redundancy_threshold = 0.999;
  RagToy toy{std::make_unique<Corpus>(cc), {}, {}, {}, c.k};
  const Matrix<double> map = random_matrix(c.output_dim, c.dim, 1.0, rng);
  EntryId next_id = 1;
  for (std::size_t m = 0; m < c.domains; ++m) {
    const Vec proto = unit({}, 1.0);
    for (std::size_t e = 0; e < c.entries_per_domain; ++e) {
      toy.corpus->ingest({next_id++, unit(proto, c.spread), "domain " + std::to_string(m) +
                          " note " + std::to_string(e), "", {}, 0, 0, 0.0, "toy"}, 0);
    }
    const double noise = m < c.label_noise.size() ? c.label_noise[m] : 0.0;
    auto sample = [&](double label_noise) {
      RagSample s;
      s.query.embedding = unit(proto, c.spread);
      s.query.text = "domain " + std::to_string(m);
      s.target = matvec(map, s.query.embedding);
      for (double& y : s.target) y += label_noise * normal(rng);
      s.domain = m;
      return s;
    };
    std::vector<RagSample> train;
    for (std::size_t i = 0; i < c.samples_per_domain; ++i) train.push_back(sample(noise));
    toy.domains.push_back(std::move(train));
    for (std::size_t i = 0; i < c.val_per_domain; ++i) toy.val.push_back(sample(0.0));
  }
  toy.state.retriever = RetrieverParams::identity(c.dim, c.alpha);
  toy.state.generator = GeneratorParams::random(2 * c.dim, c.hidden, c.output_dim, rng);
  toy.state.weights = DomainWeights::uniform(c.domains);
  return toy;
}

// ---------------------------------------------------------------------------
// Two-cluster mixture-of-experts regression. Inputs carry a trailing bias 1.

struct MoeToyConfig {
  std::uint64_t seed = 0;
  std::size_t per_cluster = 40;
  std::size_t experts = 2;
  double separation = 2.0;
  double noise = 0.3;
  double init_scale = 0.01;
};

struct MoeToy {
  std::vector<MoeSample> data;
  std::vector<std::size_t> cluster;
  GatingParams gating;
  ExpertParams experts;
};

inline MoeToy make_moe_toy(const MoeToyConfig& c) {
  std::mt19937_64 rng(c.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MoeToy toy;
  for (std::size_t i = 0; i < 2 * c.per_cluster; ++i) {
    const std::size_t k = i % 2;
    const double sign = k == 0 ? 1.0 : -1.0;
    const double x0 = sign * c.separation + c.noise * normal(rng);
    const double x1 = c.noise * normal(rng);
    // Cluster 0: y = x1 + 1; cluster 1: y = -x1 - 1.
    toy.data.push_back({{x0, x1, 1.0}, {sign * (x1 + 1.0)}});
    toy.cluster.push_back(k);
  }
  toy.gating = {random_matrix(c.experts, 3, c.init_scale, rng), 1};
  for (std::size_t e = 0; e < c.experts; ++e) toy.experts.maps.emplace_back(1, 3);
  return toy;
}

// ---------------------------------------------------------------------------
// Nested quadratics with closed-form optima.

/// min (x - 3)^2.
inline NestedProblem quadratic_k1() {
  return {{NestedLevel(Vec{0.0}, [](const auto& x) {
    using S = std::decay_t<decltype(x[0][0])>;
    const S d = x[0][0] - S(3.0);
    return d * d;
  })}};
}

/// Upper (x1 - 5)^2, lower (x2 - x1)^2. Optimum (5, 5).
inline NestedProblem chain_k2() {
  return {{NestedLevel(Vec{0.0},
                       [](const auto& x) {
                         using S = std::decay_t<decltype(x[0][0])>;
                         const S d = x[0][0] - S(5.0);
                         return d * d;
                       }),
           NestedLevel(Vec{0.0}, [](const auto& x) {
             const auto d = x[1][0] - x[0][0];
             return d * d;
           })}};
}

/// F1 = (x1-5)^2 + (x3-4)^2, F2 = (x2-x1)^2 + (x3-2)^2, F3 = (x3-x2)^2.
/// Lower responses x3 = x2, x2 = (x1+2)/2, so x1 minimizes
/// (x1-5)^2 + ((x1+2)/2 - 4)^2, giving x1 = 5.2 and x2 = x3 = 3.6.
inline NestedProblem chain_k3() {
  return {{NestedLevel(Vec{0.0},
                       [](const auto& x) {
                         using S = std::decay_t<decltype(x[0][0])>;
                         const S a = x[0][0] - S(5.0);
                         const S b = x[2][0] - S(4.0);
                         return a * a + b * b;
                       }),
           NestedLevel(Vec{0.0},
                       [](const auto& x) {
                         using S = std::decay_t<decltype(x[0][0])>;
                         const S a = x[1][0] - x[0][0];
                         const S b = x[2][0] - S(2.0);
                         return a * a + b * b;
                       }),
           NestedLevel(Vec{0.0}, [](const auto& x) {
             const auto d = x[2][0] - x[1][0];
             return d * d;
           })}};
}

inline NestedProblem nested_problem_by_name(const std::string& name) {
  if (name == "quadratic_k1") return quadratic_k1();
  if (name == "chain_k2") return chain_k2();
  if (name == "chain_k3") return chain_k3();
  throw Error(ErrorCode::InvalidArgument, "unknown nested problem '" + name + "'");
}

}  // namespace crag
