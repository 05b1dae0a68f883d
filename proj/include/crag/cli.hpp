#pragma once

// Command implementations behind the crag executable. Each returns the
// process exit code: 0 ok, 1 config error, 2 runtime error, 3 agent suite
// not fully passing.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>

#include "crag/agent.hpp"
#include "crag/config.hpp"
#include "crag/metrics.hpp"
#include "crag/model_io.hpp"
#include "crag/multilevel.hpp"
#include "crag/scheduler.hpp"

namespace crag {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitSuiteFailed = 3;

namespace cli_detail {

inline std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  require(out.good(), ErrorCode::InvalidArgument, "cannot write '" + p.string() + "'");
  return out;
}

/// Runs `body`; maps config-parse failures to 1 and everything else to 2.
template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::ParseError ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

inline std::string metric_or_na(const std::vector<MetricWindow>& w, double (*f)(std::span<const MetricWindow>, MetricSelector)) {
  try {
    return fmt("%.6f", f(w, MetricSelector::Ndcg));
  } catch (const Error&) {
    return "n/a";
  }
}

inline void write_rag_trace(std::ostream& out, const std::vector<RagTraceRecord>& trace) {
  for (const auto& r : trace) {
    nlohmann::json j{{"step", r.step}, {"level", r.level}, {"objective", r.objective},
                     {"w", r.w}, {"domain_losses", r.domain_losses}};
    out << j.dump() << '\n';
  }
}

}  // namespace cli_detail

inline int cmd_run(const std::filesystem::path& config_path,
                   const std::optional<std::filesystem::path>& out_override, std::ostream& out,
                   std::ostream& err) {
  using namespace cli_detail;
  ScenarioConfig cfg;
  const int parsed = guarded(err, [&] {
    cfg = scenario_config_from_json(load_json_file(config_path));
    return kExitOk;
  });
  if (parsed != kExitOk) return parsed;
  return guarded(err, [&]() -> int {
    const std::filesystem::path dir = out_override.value_or(cfg.output_dir);
    std::filesystem::create_directories(dir);
    Corpus corpus(cfg.corpus);
    ModelState state = initial_state(cfg);
    RunReport partial;
    try {
      run(cfg.stream, corpus, state, cfg.timescale, cfg.seed, cfg.options, &partial);
    } catch (...) {
      auto ticks = open_out(dir / "ticks.ldj");
      write_tick_reports(ticks, partial.ticks);
      throw;
    }
    const RunReport& report = partial;
    {
      auto f = open_out(dir / "metrics.csv");
      write_metrics_csv(f, report.windows);
    }
    {
      auto f = open_out(dir / "ticks.ldj");
      write_tick_reports(f, report.ticks);
    }
    {
      auto f = open_out(dir / "model.crag-model");
      write_model(f, state);
    }
    {
      auto f = open_out(dir / "corpus.crag-corpus");
      write_snapshot(f, corpus.snapshot());
    }
    out << "ticks " << cfg.timescale.total_ticks << ", windows " << report.windows.size()
        << ", actions retriever=" << report.retriever_actions << " kb=" << report.kb_actions
        << " model=" << report.model_actions << '\n';
    out << "retention " << metric_or_na(report.windows, relevance_retention_rate)
        << ", degradation " << metric_or_na(report.windows, retrieval_degradation_rate)
        << ", stability " << metric_or_na(report.windows, temporal_stability) << '\n';
    out << "corpus entries " << corpus.size() << ", outputs in " << dir.string() << '\n';
    return kExitOk;
  });
}

inline int cmd_solve(const std::string& kind, const std::filesystem::path& config_path,
                     const std::optional<std::filesystem::path>& out_override, std::ostream& out,
                     std::ostream& err) {
  using namespace cli_detail;
  if (kind != "bilevel" && kind != "trilevel" && kind != "moe" && kind != "nested") {
    err << "error: unknown solver kind '" << kind << "'\n";
    return kExitConfig;
  }
  nlohmann::json j;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  const int parsed = guarded(err, [&] {
    j = load_json_file(config_path);
    require(j.is_object(), ErrorCode::ParseError, "config must be a JSON object");
    seed = get_key<std::uint64_t>(j, "seed", "");
    dir = out_override.value_or(get_key<std::string>(j, "output_dir", "", "out"));
    return kExitOk;
  });
  if (parsed != kExitOk) return parsed;

  const nlohmann::json empty = nlohmann::json::object();
  if (kind == "nested") {
    NestedProblem problem;
    SolverConfig solver;
    const int ok = guarded(err, [&] {
      const auto name = get_key<std::string>(j, "problem", "");
      check_key("problem", [&] { problem = nested_problem_by_name(name); });
      solver = solver_config_from_json(j.value("solver", empty), "solver");
      return kExitOk;
    });
    if (ok != kExitOk) return ok;
    return guarded(err, [&] {
      const NestedResult r = solve_nested(problem, solver);
      std::filesystem::create_directories(dir);
      auto f = open_out(dir / "trace.ldj");
      for (const auto& t : r.trace) {
        f << nlohmann::json{{"step", t.step}, {"level", t.level}, {"objective", t.objective}}.dump()
          << '\n';
      }
      for (std::size_t k = 0; k < r.x.size(); ++k) {
        out << "x" << k + 1 << " =";
        for (double v : r.x[k]) out << ' ' << fmt("%.4f", v);
        out << '\n';
      }
      out << "final objective " << fmt("%.6f", problem.levels[0].eval<double>(r.x)) << '\n';
      return kExitOk;
    });
  }

  if (kind == "moe") {
    MoeToyConfig toy_cfg;
    RoutingConfig routing;
    MoeSolverConfig solver;
    const int ok = guarded(err, [&] {
      toy_cfg = moe_toy_config_from_json(j.value("toy", empty), "toy", seed);
      routing = routing_config_from_json(j.value("routing", empty), "routing");
      solver = moe_solver_config_from_json(j.value("solver", empty), "solver");
      return kExitOk;
    });
    if (ok != kExitOk) return ok;
    return guarded(err, [&] {
      const MoeToy toy = make_moe_toy(toy_cfg);
      const MoeResult r = bilevel_train_moe(toy.data, toy.gating, toy.experts, routing, solver);
      std::filesystem::create_directories(dir);
      auto f = open_out(dir / "trace.ldj");
      for (const auto& t : r.trace) {
        f << nlohmann::json{{"step", t.step},
                            {"routing_loss", t.routing_loss},
                            {"expert_loss", t.expert_loss},
                            {"upper_loss", t.upper_loss}}
                 .dump()
          << '\n';
      }
      out << "purity " << fmt("%.4f", routing_purity(toy.data, toy.cluster, r.gating)) << '\n';
      out << "final objective " << fmt("%.6f", expert_loss(toy.data, r.gating, r.experts)) << '\n';
      return kExitOk;
    });
  }

  RagToyConfig toy_cfg;
  RagSolverConfig solver;
  double epsilon = 0.1;
  DroSense sense = DroSense::WorstCase;
  const int ok = guarded(err, [&] {
    toy_cfg = rag_toy_config_from_json(j.value("toy", empty), "toy", seed);
    solver.solver = solver_config_from_json(j.value("solver", empty), "solver", solver.solver);
    epsilon = get_key<double>(j, "epsilon", "", epsilon);
    require(epsilon >= 0.0, ErrorCode::ParseError, "config key 'epsilon' must be >= 0");
    const auto s = get_key<std::string>(j, "sense", "", "worst_case");
    check_key("sense", [&] { sense = dro_sense_from_string(s); });
    return kExitOk;
  });
  if (ok != kExitOk) return ok;
  return guarded(err, [&] {
    RagToy toy = make_rag_toy(toy_cfg);
    toy.state.weights.epsilon = epsilon;
    toy.state.weights.sense = sense;
    const RagResult r =
        kind == "bilevel"
            ? solve_bilevel_rag(toy.train(), toy.val, toy.state, solver, toy.context())
            : solve_trilevel(toy.domains, toy.val, toy.state, solver, toy.context());
    std::filesystem::create_directories(dir);
    auto f = open_out(dir / "trace.ldj");
    write_rag_trace(f, r.trace);
    out << "weights";
    for (double w : r.state.weights.w) out << ' ' << fmt("%.4f", w);
    out << '\n';
    out << "final objective " << fmt("%.6f", r.trace.back().objective) << '\n';
    return kExitOk;
  });
}

inline int cmd_agent(const std::filesystem::path& config_path, bool empty_corpus,
                     const std::optional<std::string>& endpoint_override, std::ostream& out,
                     std::ostream& err) {
  using namespace cli_detail;
  AgentSuite suite;
  GeneratorBackend backend;
  const int parsed = guarded(err, [&] {
    const nlohmann::json j = load_json_file(config_path);
    require(j.is_object(), ErrorCode::ParseError, "case file must be a JSON object");
    suite = agent_suite_from_json(j);
    for (int level = 1; level <= 3; ++level) {
      require(std::any_of(suite.cases.begin(), suite.cases.end(),
                          [&](const TaskCase& c) { return c.level == level; }),
              ErrorCode::ParseError,
              "config key 'cases' has no level-" + std::to_string(level) + " case");
    }
    const nlohmann::json b = j.value("backend", nlohmann::json::object());
    const auto kind = get_key<std::string>(b, "kind", "backend", "mock_rules");
    require(kind == "mock_rules" || kind == "remote_text", ErrorCode::ParseError,
            "config key 'backend.kind' must be mock_rules or remote_text");
    backend.kind = kind == "mock_rules" ? BackendKind::MockRules : BackendKind::RemoteText;
    backend.endpoint = get_key<std::string>(b, "endpoint", "backend", "");
    backend.timeout_s = get_key<double>(b, "timeout_s", "backend", backend.timeout_s);
    backend.max_tokens = get_key<int>(b, "max_tokens", "backend", backend.max_tokens);
    if (const char* env = std::getenv("CRAG_ENDPOINT"); env != nullptr && *env != '\0') {
      backend.endpoint = env;
    }
    if (endpoint_override) backend.endpoint = *endpoint_override;
    require(backend.kind == BackendKind::MockRules || !backend.endpoint.empty(),
            ErrorCode::ParseError, "config key 'backend.endpoint' is required for remote_text");
    return kExitOk;
  });
  if (parsed != kExitOk) return parsed;
  return guarded(err, [&] {
    const ToolRegistry registry = make_default_registry();
    Corpus corpus = build_agent_corpus(registry, suite.facts);
    if (empty_corpus) corpus.clear();
    const RetrieverParams retriever = RetrieverParams::identity(corpus.config().dim, 1.0);
    const LevelReport report = run_level_suite(suite.cases, corpus, retriever, registry, backend);
    for (const auto& o : report.outcomes) {
      out << (o.passed ? "PASS" : "FAIL") << " L" << o.level << " " << o.query;
      if (!o.error.empty()) out << "  [" << o.error << "]";
      out << '\n';
    }
    for (int level = 1; level <= 3; ++level) {
      const auto i = static_cast<std::size_t>(level - 1);
      out << "level " << level << ": " << report.passed[i] << "/" << report.total[i] << " "
          << fmt("%.2f", report.rate(level)) << '\n';
    }
    return report.all_pass() ? kExitOk : kExitSuiteFailed;
  });
}

}  // namespace crag
