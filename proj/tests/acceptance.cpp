#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crag/agent.hpp"
#include "crag/cli.hpp"
#include "crag/config.hpp"
#include "crag/dro.hpp"
#include "crag/fusion.hpp"
#include "crag/metrics.hpp"
#include "crag/moe.hpp"
#include "crag/multilevel.hpp"
#include "crag/nested.hpp"
#include "crag/retrieval.hpp"
#include "crag/scheduler.hpp"
#include "crag/stream.hpp"
#include "crag/toys.hpp"

using namespace crag;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(CRAG_SOURCE_DIR) / "configs";

struct Check {
  bool ok = true;
  std::string detail;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) detail = what;
    ok = ok && cond;
  }
};

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

// Each criterion returns a Check; the runner adds the time limit.
using Criterion = std::function<Check()>;

Check retrieval_oracle() {
  Check c;
  std::mt19937_64 rng(101);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t dim = 8;
  auto rv = [&] {
    Vec v(dim);
    for (double& x : v) x = n(rng);
    return normalized(v);
  };
  CorpusConfig cfg;
  cfg.dim = dim;
  cfg.redundancy_threshold = 1.0;
  Corpus corpus(cfg);
  for (EntryId id = 1; id <= 50; ++id) {
    const Tick t = static_cast<Tick>(id % 7);
    corpus.ingest({id, rv(), "entry", id % 3 ? "a" : "b", {{"task", u(rng)}}, t, t, 0.0, "s"}, t);
  }
  std::size_t mismatches = 0;
  for (int setting = 0; setting < 10; ++setting) {
    const RetrieverParams params{u(rng), random_matrix(dim, dim, 1.0, rng), 1.0};
    for (int i = 0; i < 200; ++i) {
      const std::size_t k = 1 + i % 10;
      const Query q{"q", rv(), {"task", "", {}}, 9};
      std::vector<std::pair<double, EntryId>> all;
      corpus.for_each([&](const KnowledgeEntry& e) {
        all.push_back({-score(q, e, params, corpus.freshness(e, 9)), e.id});
      });
      std::sort(all.begin(), all.end());
      std::vector<EntryId> oracle;
      for (std::size_t j = 0; j < k; ++j) oracle.push_back(all[j].second);
      std::vector<EntryId> got = retrieve_topk(q, k, corpus, params).ids();
      std::sort(oracle.begin(), oracle.end());
      std::sort(got.begin(), got.end());
      if (got != oracle) ++mismatches;
    }
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " of 2000 queries differ");
  return c;
}

Check metric_values() {
  Check c;
  auto hit = [](EntryId rank) {
    RankedResult r;
    r.ranked = {1, 2, 3};
    r.relevant = {rank};
    return r;
  };
  const double m = mrr(std::vector{hit(1), hit(2)});
  c.expect(std::abs(m - 0.75) < 1e-12, "mrr " + num(m));
  RankedResult swapped;
  swapped.ranked = {1, 2};
  swapped.gains = {{1, 0.0}, {2, 1.0}};
  const double nd = ndcg(std::vector{swapped}, 2);
  c.expect(std::abs(nd - 0.6309) < 1e-4, "ndcg " + num(nd));
  std::vector<MetricWindow> line;
  for (std::size_t t = 0; t < 10; ++t) {
    const double y = 1.0 - 0.1 * static_cast<double>(t);
    line.push_back({t, y, y, y, 1});
  }
  const double d = retrieval_degradation_rate(line, MetricSelector::Ndcg);
  c.expect(std::abs(d - 0.1) < 1e-9, "degradation " + num(d));
  return c;
}

Check dro_weights() {
  Check c;
  const Vec losses{1, 2, 3};
  const double eps = 0.1;
  Vec best;
  double best_obj = -1e300;
  for (int i = 0; i < 10000; ++i) {
    const double temp = 0.5 + 4.5 * i / 9999.0;
    const Vec w = tilted_weights(losses, 1.0 / temp);
    if (kl_to_uniform(w) > eps) continue;
    const double obj = w[0] * losses[0] + w[1] * losses[1] + w[2] * losses[2];
    if (obj > best_obj) {
      best_obj = obj;
      best = w;
    }
  }
  const DomainWeights got = solve_dro_weights(losses, eps, DroSense::WorstCase);
  c.expect(best.size() == 3, "grid found no feasible point");
  for (std::size_t m = 0; m < best.size(); ++m) {
    c.expect(std::abs(got.w[m] - best[m]) < 1e-4,
             "w[" + std::to_string(m) + "] " + num(got.w[m]) + " vs grid " + num(best[m]));
  }
  const DomainWeights flat = solve_dro_weights(Vec{2, 2, 2}, eps, DroSense::WorstCase);
  for (double w : flat.w) c.expect(std::abs(w - 1.0 / 3.0) < 1e-8, "equal losses gave " + num(w));
  const DomainWeights zero = solve_dro_weights(losses, 0.0, DroSense::WorstCase);
  for (double w : zero.w) c.expect(w == 1.0 / 3.0, "eps 0 gave " + num(w));
  return c;
}

Check bilevel_analytic() {
  Check c;
  SolverConfig cfg;
  cfg.outer_steps = 200;
  cfg.inner_steps = 20;
  cfg.unroll_depth = 20;
  cfg.lr = {0.1, 0.2};
  const NestedResult r = solve_nested(chain_k2(), cfg);
  c.expect(std::abs(r.x[0][0] - 5.0) < 1e-3 && std::abs(r.x[1][0] - 5.0) < 1e-3,
           "solution (" + num(r.x[0][0]) + ", " + num(r.x[1][0]) + ")");

  const NestedProblem probe{{NestedLevel(Vec{0.4, -0.3},
                                         [](const auto& x) {
                                           using S = std::decay_t<decltype(x[0][0])>;
                                           const S a = x[1][0] - S(1.0);
                                           return a * a + x[0][0] * x[0][0] * S(0.1) +
                                                  x[0][1] * x[1][0];
                                         }),
                             NestedLevel(Vec{0.0}, [](const auto& x) {
                               using S = std::decay_t<decltype(x[0][0])>;
                               const S d = x[1][0] - x[0][0] * x[0][1] - S(0.5);
                               return d * d + S(0.1) * x[1][0] * x[1][0];
                             })}};
  SolverConfig hc;
  hc.inner_steps = 30;
  hc.unroll_depth = 30;
  hc.lr = {0.1, 0.2};
  auto upper = [&](const Vec& x0) {
    Vars<double> v = nested_detail::initial_vars(probe);
    v[0] = x0;
    for (std::size_t s = 0; s < hc.inner_steps; ++s) nested_detail::level_update<1, double>(probe, v, hc);
    return probe.levels[0].eval<double>(v);
  };
  auto x = nested_detail::initial_vars(probe);
  const Vec g = nested_hypergradient(probe, x, hc);
  const double h = 1e-6;
  for (std::size_t i = 0; i < 2; ++i) {
    Vec up = probe.levels[0].init();
    Vec dn = up;
    up[i] += h;
    dn[i] -= h;
    const double fd = (upper(up) - upper(dn)) / (2 * h);
    c.expect(std::abs(g[i] - fd) <= 1e-3 * std::max(std::abs(fd), 1e-12),
             "hypergradient[" + std::to_string(i) + "] " + num(g[i]) + " vs fd " + num(fd));
  }
  return c;
}

Check trilevel_degeneracy() {
  Check c;
  RagToyConfig tc;
  tc.seed = 3;
  tc.label_noise = {0.05, 0.5};
  RagSolverConfig cfg;
  cfg.solver.outer_steps = 30;
  {
    RagToy toy = make_rag_toy(tc);
    toy.state.weights.epsilon = 0.0;
    const RagResult tri = solve_trilevel(toy.domains, toy.val, toy.state, cfg, toy.context());
    const RagResult bi = solve_bilevel_rag(toy.train(), toy.val, toy.state, cfg, toy.context());
    c.expect(tri.trace == bi.trace && tri.state == bi.state, "eps 0 trace differs from bilevel");
  }
  RagToy toy = make_rag_toy(tc);
  toy.state.weights = DomainWeights::uniform(2, 0.1, DroSense::WorstCase);
  const RagResult r = solve_trilevel(toy.domains, toy.val, toy.state, cfg, toy.context());
  c.expect(r.state.weights.w[1] > 0.5, "noisy domain weight " + num(r.state.weights.w[1]));
  return c;
}

Check moe_bilevel() {
  Check c;
  {
    MoeToyConfig tc;
    tc.seed = 9;
    tc.experts = 1;
    const MoeToy toy = make_moe_toy(tc);
    MoeSolverConfig solver;
    solver.holdout_every = 1;
    solver.outer_steps = 300;
    solver.inner_steps = 10;
    solver.unroll_depth = 1;
    solver.lr_inner = 0.1;
    const MoeResult r = bilevel_train_moe(toy.data, toy.gating, toy.experts, {}, solver);
    // Normal equations for the single linear expert.
    Matrix<double> a(3, 4);
    for (const auto& s : toy.data) {
      for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) a(i, j) += s.x[i] * s.x[j];
        a(i, 3) += s.x[i] * s.y[0];
      }
    }
    for (std::size_t col = 0; col < 3; ++col) {
      for (std::size_t row = col + 1; row < 3; ++row) {
        const double f = a(row, col) / a(col, col);
        for (std::size_t k = col; k < 4; ++k) a(row, k) -= f * a(col, k);
      }
    }
    ExpertParams direct{{Matrix<double>(1, 3)}};
    for (std::size_t col = 3; col-- > 0;) {
      double v = a(col, 3);
      for (std::size_t k = col + 1; k < 3; ++k) v -= a(col, k) * direct.maps[0].data[k];
      direct.maps[0].data[col] = v / a(col, col);
    }
    const double oracle = expert_loss(toy.data, toy.gating, direct);
    const double got = expert_loss(toy.data, r.gating, r.experts);
    c.expect(std::abs(got - oracle) < 1e-3, "N=1 loss " + num(got) + " vs " + num(oracle));
  }
  {
    MoeToyConfig tc;
    tc.seed = 5;
    const MoeToy toy = make_moe_toy(tc);
    MoeSolverConfig solver;
    solver.lr_inner = 0.2;
    const MoeResult r = bilevel_train_moe(toy.data, toy.gating, toy.experts, {0.0, 0.01, 0.0}, solver);
    const double purity = routing_purity(toy.data, toy.cluster, r.gating);
    c.expect(purity >= 0.9, "purity " + num(purity));
  }
  {
    std::vector<MoeSample> batch;
    for (int i = 0; i < 8; ++i) batch.push_back({{i % 2 ? 1.0 : -1.0, 0.0, 1.0}, {0.0}});
    const GatingParams uniform{Matrix<double>(2, 3), 1};
    const double bal = routing_loss(batch, uniform, {0.0, 1.0, 0.0});
    c.expect(std::abs(bal - 1.0) < 1e-12, "balance at uniform " + num(bal));
  }
  return c;
}

Check continual_beats_static() {
  Check c;
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto j = load_json_file(kConfigs / "scenario.json");
    j["seed"] = seed;
    const ScenarioConfig cont = scenario_config_from_json(j);
    ScenarioConfig stat = cont;
    stat.timescale.f_kb = std::nullopt;
    auto go = [](const ScenarioConfig& cfg) {
      Corpus corpus(cfg.corpus);
      ModelState state = initial_state(cfg);
      return run(cfg.stream, corpus, state, cfg.timescale, cfg.seed, cfg.options);
    };
    const RunReport a = go(cont);
    const RunReport b = go(stat);
    const double ra = relevance_retention_rate(a.windows, MetricSelector::Ndcg);
    const double rb = relevance_retention_rate(b.windows, MetricSelector::Ndcg);
    const double da = retrieval_degradation_rate(a.windows, MetricSelector::Ndcg);
    const double db = retrieval_degradation_rate(b.windows, MetricSelector::Ndcg);
    c.expect(ra > rb && da < db, "seed " + std::to_string(seed) + ": retention " + num(ra) +
                                     " vs " + num(rb) + ", degradation " + num(da) + " vs " +
                                     num(db));
  }
  return c;
}

Check forgetting_control() {
  Check c;
  StreamConfig sc;
  sc.seed = 1;
  sc.concept_drift = true;
  sc.drift_events = {{DriftKind::Abrupt, 10, 1, 1.0, {}}};
  const Stream stream(sc);
  CorpusConfig cc;
  cc.dim = sc.dim;
  cc.redundancy_threshold = sc.redundancy_threshold;
  Corpus corpus(cc);
  plant_knowledge(corpus, 0, stream);
  plant_knowledge(corpus, 10, stream);
  const auto retriever = RetrieverParams::identity(sc.dim);
  auto conditioned = [&](Tick from, Tick to) {
    std::vector<ConditionedSample> out;
    for (Tick t = from; t < to; ++t) {
      for (const StreamSample& s : stream.next_batch(t).samples) {
        const std::string& name = sc.domains[s.domain].name;
        const Query q{s.text, s.x, {name, name, {}}, t};
        out.push_back({s.x, resolve(retrieve_topk(q, 3, corpus, retriever), corpus), s.y});
      }
    }
    return out;
  };
  const auto pre = conditioned(1, 10);
  const auto post = conditioned(10, 19);

  std::mt19937_64 rng(1);
  GeneratorParams phi = GeneratorParams::random(2 * sc.dim, 16, sc.output_dim, rng);
  FinetuneConfig fit;
  fit.lr = 0.05;
  for (int i = 0; i < 2000; ++i) phi = finetune_step(pre, phi, phi, fit);
  const GeneratorParams pre_drift = phi;
  const double base = mean_task_loss(pre, pre_drift, {});

  auto adapt = [&](double lambda) {
    FinetuneConfig cfg;
    cfg.lr = 0.05;
    cfg.lambda_reg = lambda;
    GeneratorParams p = pre_drift;
    for (int i = 0; i < 300; ++i) p = finetune_step(post, p, pre_drift, cfg);
    return mean_task_loss(pre, p, {});
  };
  const double held = adapt(10.0);
  const double free = adapt(0.0);
  c.expect(held <= 2.0 * base, "lambda 10: " + num(held) + " vs base " + num(base));
  c.expect(free > 2.0 * base, "lambda 0: " + num(free) + " vs base " + num(base));
  return c;
}

Check agent_suite() {
  Check c;
  const AgentSuite suite = agent_suite_from_json(load_json_file(kConfigs / "agent_suite.json"));
  const ToolRegistry registry = make_default_registry();
  const auto retriever = RetrieverParams::identity(kAgentDim);
  Corpus corpus = build_agent_corpus(registry, suite.facts);
  const LevelReport full = run_level_suite(suite.cases, corpus, retriever, registry, {});
  c.expect(full.all_pass(), "suite " + num(full.rate(1)) + "/" + num(full.rate(2)) + "/" +
                                num(full.rate(3)));
  Corpus empty = build_agent_corpus(registry, suite.facts);
  empty.clear();
  const LevelReport none = run_level_suite(suite.cases, empty, retriever, registry, {});
  c.expect(none.rate(1) == 0.0, "empty corpus level 1 rate " + num(none.rate(1)));

  Corpus mem = build_agent_corpus(registry, suite.facts);
  const std::string q = suite.cases.front().query;
  const AgentAnswer first = answer_query(q, mem, retriever, registry, {}, suite.cases.front().state);
  const AgentAnswer second =
      answer_query(q, mem, retriever, registry, {}, suite.cases.front().state, 1);
  c.expect(std::count(second.retrieved.begin(), second.retrieved.end(), first.memory) == 1,
           "repeat query did not retrieve memory entry");
  return c;
}

Check determinism() {
  Check c;
  const fs::path root = fs::temp_directory_path() / "crag_acceptance";
  fs::remove_all(root);
  std::ostringstream out;
  std::ostringstream err;
  const int a = cmd_run(kConfigs / "scenario.json", root / "a", out, err);
  const int b = cmd_run(kConfigs / "scenario.json", root / "b", out, err);
  c.expect(a == kExitOk && b == kExitOk, "cmd_run failed: " + err.str());
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string ma = slurp(root / "a" / "metrics.csv");
  c.expect(!ma.empty() && ma == slurp(root / "b" / "metrics.csv"), "metrics.csv differs");
  fs::remove_all(root);
  return c;
}

}  // namespace

int main() {
  struct Entry {
    int id;
    const char* name;
    double limit_s;
    Criterion run;
  };
  const std::vector<Entry> criteria{
      {1, "retrieval oracle equivalence", 5, retrieval_oracle},
      {2, "metric hand-values", 1, metric_values},
      {3, "DRO weights", 5, dro_weights},
      {4, "bilevel analytic", 10, bilevel_analytic},
      {5, "trilevel degeneracy", 60, trilevel_degeneracy},
      {6, "MoE bilevel", 60, moe_bilevel},
      {7, "continual beats static", 120, continual_beats_static},
      {8, "forgetting control", 60, forgetting_control},
      {9, "agent level suite", 10, agent_suite},
      {10, "determinism", 120, determinism},
  };
  int failed = 0;
  for (const Entry& e : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Check c;
    try {
      c = e.run();
    } catch (const std::exception& ex) {
      c.ok = false;
      c.detail = std::string("threw: ") + ex.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    c.expect(secs < e.limit_s, "took " + num(secs) + " s, limit " + num(e.limit_s) + " s");
    std::printf("%s criterion %d: %s (%.2f s)%s%s\n", c.ok ? "PASS" : "FAIL", e.id, e.name, secs,
                c.ok ? "" : " - ", c.detail.c_str());
    if (!c.ok) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
