#pragma once

// Multi-timescale orchestration: retriever steps, knowledge-base refresh and
// generator adaptation each fire on their own tick period over a simulated run.

#include <array>
#include <deque>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crag/core.hpp"
#include "crag/corpus.hpp"
#include "crag/fusion.hpp"
#include "crag/json_util.hpp"
#include "crag/metrics.hpp"
#include "crag/multilevel.hpp"
#include "crag/retrieval.hpp"
#include "crag/stream.hpp"

namespace crag {

enum class Loop { Retriever, Kb, Model };

inline std::string_view to_string(Loop l) {
  switch (l) {
    case Loop::Retriever: return "retriever";
    case Loop::Kb: return "kb";
    case Loop::Model: return "model";
  }
  return "retriever";
}

inline Loop loop_from_string(std::string_view s) {
  if (s == "retriever") return Loop::Retriever;
  if (s == "kb") return Loop::Kb;
  if (s == "model") return Loop::Model;
  throw Error(ErrorCode::InvalidArgument, "unknown loop '" + std::string(s) + "'");
}

/// A period of nullopt never fires.
using Period = std::optional<Tick>;

struct TimescaleConfig {
  Period f_retriever = 1;
  Period f_kb = 5;
  Period f_model = 20;
  std::array<Loop, 3> ordering{Loop::Retriever, Loop::Kb, Loop::Model};
  Tick total_ticks = 100;
  Tick window_size = 10;

  Period period(Loop l) const {
    switch (l) {
      case Loop::Retriever: return f_retriever;
      case Loop::Kb: return f_kb;
      case Loop::Model: return f_model;
    }
    return std::nullopt;
  }

  bool fires(Loop l, Tick t) const {
    const Period p = period(l);
    return p.has_value() && t % *p == 0;
  }

  void validate() const {
    for (Loop l : {Loop::Retriever, Loop::Kb, Loop::Model}) {
      const Period p = period(l);
      require(!p || *p >= 1, ErrorCode::InvariantViolation,
              "period for " + std::string(to_string(l)) + " must be >= 1");
    }
    require(ordering[0] != ordering[1] && ordering[0] != ordering[2] && ordering[1] != ordering[2],
            ErrorCode::InvariantViolation, "ordering must be a permutation of the three loops");
    require(window_size >= 1, ErrorCode::InvariantViolation, "window_size must be >= 1");
    require(total_ticks >= window_size, ErrorCode::InvariantViolation,
            "total_ticks must be >= window_size");
  }
};

struct SchedulerOptions {
  std::size_t k = 3;
  FusionConfig fusion;
  double retriever_lr = 0.05;
  FinetuneConfig finetune{.lambda_reg = 1.0, .lr = 0.05, .fusion = {}};
  /// Ticks of conditioned samples kept for generator adaptation.
  std::size_t replay_ticks = 10;
  bool initial_plant = true;
};

struct TickReport {
  Tick tick = 0;
  std::vector<Loop> actions;
  MetricWindow window;
  double divergence = 0.0;
};

struct RunReport {
  std::vector<TickReport> ticks;
  std::vector<MetricWindow> windows;
  std::size_t retriever_actions = 0;
  std::size_t kb_actions = 0;
  std::size_t model_actions = 0;
};

namespace scheduler_detail {

inline Query make_query(const StreamSample& s, const Stream& stream, Tick t) {
  const std::string& name = stream.config().domains[s.domain].name;
  return {s.text, s.x, {name, name, {}}, t};
}

}  // namespace scheduler_detail

/// Runs ticks 1..total_ticks. `corpus` and `state` are updated in place. A
/// component error propagates; `partial` (if given) then holds the reports
/// of the ticks that completed.
inline RunReport run(const StreamConfig& stream_config, Corpus& corpus, ModelState& state,
                     const TimescaleConfig& ts, std::uint64_t seed,
                     const SchedulerOptions& opts = {}, RunReport* partial = nullptr) {
  ts.validate();
  StreamConfig sc = stream_config;
  sc.seed = seed;
  const Stream stream(sc);
  if (opts.initial_plant) plant_knowledge(corpus, 0, stream);

  RunReport local;
  RunReport& report = partial != nullptr ? *partial : local;
  report = {};
  const StreamBatch nominal = stream.next_batch(0);
  std::deque<std::vector<ConditionedSample>> replay;
  GeneratorParams anchor = state.generator;
  std::vector<RankedResult> window_results;
  const RagContext base_ctx{&corpus, 0, opts.k, opts.fusion, {}};

  for (Tick t = 1; t <= ts.total_ticks; ++t) {
    const StreamBatch batch = stream.next_batch(t);
    std::vector<ConditionedSample> conditioned;
    std::vector<RagSample> rag;
    for (std::size_t i = 0; i < batch.samples.size(); ++i) {
      const StreamSample& s = batch.samples[i];
      const Query q = scheduler_detail::make_query(s, stream, t);
      const RetrievedSet set = retrieve_topk(q, opts.k, corpus, state.retriever);
      RankedResult r;
      r.query_id = std::to_string(t) + ":" + std::to_string(i);
      r.ranked = set.ids();
      r.relevant.insert(s.relevant.begin(), s.relevant.end());
      window_results.push_back(std::move(r));
      conditioned.push_back({s.x, resolve(set, corpus), s.y});
      rag.push_back({q, s.y, s.domain});
    }
    replay.push_back(std::move(conditioned));
    while (replay.size() > opts.replay_ticks) replay.pop_front();

    TickReport tr;
    tr.tick = t;
    for (Loop loop : ts.ordering) {
      if (!ts.fires(loop, t)) continue;
      tr.actions.push_back(loop);
      switch (loop) {
        case Loop::Retriever: {
          RagContext ctx = base_ctx;
          ctx.now = t;
          state = retriever_step(rag, state, ctx, opts.retriever_lr);
          ++report.retriever_actions;
          break;
        }
        case Loop::Kb:
          plant_knowledge(corpus, t, stream);
          corpus.prune(t);
          ++report.kb_actions;
          break;
        case Loop::Model: {
          std::vector<ConditionedSample> pool;
          for (const auto& b : replay) pool.insert(pool.end(), b.begin(), b.end());
          const GeneratorParams next = finetune_step(pool, state.generator, anchor, opts.finetune);
          anchor = state.generator;
          state.generator = next;
          ++report.model_actions;
          break;
        }
      }
    }
    const std::size_t w = static_cast<std::size_t>((t - 1) / ts.window_size);
    tr.window = evaluate_window(window_results, opts.k, w);
    tr.divergence = estimate_divergence(nominal, batch);
    report.ticks.push_back(tr);
    if (t % ts.window_size == 0 || t == ts.total_ticks) {
      report.windows.push_back(tr.window);
      window_results.clear();
    }
  }
  state.version += ts.total_ticks;
  return report;
}

struct RunComparison {
  double retention = 0.0;
  double degradation = 0.0;
  double stability = 0.0;
};

/// Per-metric deltas a - b.
inline RunComparison compare_runs(const RunReport& a, const RunReport& b,
                                  MetricSelector s = MetricSelector::Ndcg) {
  require(a.windows.size() == b.windows.size(), ErrorCode::WindowMismatch,
          "compare_runs: " + std::to_string(a.windows.size()) + " vs " +
              std::to_string(b.windows.size()) + " windows");
  return {relevance_retention_rate(a.windows, s) - relevance_retention_rate(b.windows, s),
          retrieval_degradation_rate(a.windows, s) - retrieval_degradation_rate(b.windows, s),
          temporal_stability(a.windows, s) - temporal_stability(b.windows, s)};
}

inline nlohmann::json to_json(const TickReport& r) {
  std::vector<std::string> actions;
  for (Loop l : r.actions) actions.emplace_back(to_string(l));
  return {{"tick", r.tick},
          {"actions", actions},
          {"window", r.window.index},
          {"topk", round_sig9(r.window.topk)},
          {"mrr", round_sig9(r.window.mrr)},
          {"ndcg", round_sig9(r.window.ndcg)},
          {"n_queries", r.window.n_queries},
          {"divergence", round_sig9(r.divergence)}};
}

inline void write_tick_reports(std::ostream& out, const std::vector<TickReport>& ticks) {
  for (const auto& r : ticks) out << to_json(r).dump() << '\n';
}

inline Period period_from_json(const nlohmann::json& j, const std::string& key,
                               const std::string& path, Period fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (v.is_null() || (v.is_string() && v.get<std::string>() == "inf")) return std::nullopt;
  if (v.is_number_integer()) {
    const Tick p = v.get<Tick>();
    if (p == 0) return std::nullopt;
    require(p >= 1, ErrorCode::ParseError, "config key '" + join_key(path, key) + "' must be >= 1");
    return p;
  }
  throw Error(ErrorCode::ParseError,
              "config key '" + join_key(path, key) + "' must be an integer or \"inf\"");
}

inline TimescaleConfig timescale_config_from_json(const nlohmann::json& j, const std::string& path) {
  TimescaleConfig c;
  c.f_retriever = period_from_json(j, "f_retriever", path, c.f_retriever);
  c.f_kb = period_from_json(j, "f_kb", path, c.f_kb);
  c.f_model = period_from_json(j, "f_model", path, c.f_model);
  c.total_ticks = get_key<Tick>(j, "total_ticks", path, c.total_ticks);
  c.window_size = get_key<Tick>(j, "window_size", path, c.window_size);
  if (j.contains("ordering")) {
    const auto names = get_key<std::vector<std::string>>(j, "ordering", path);
    require(names.size() == 3, ErrorCode::ParseError,
            "config key '" + join_key(path, "ordering") + "' must list three loops");
    check_key(join_key(path, "ordering"), [&] {
      for (std::size_t i = 0; i < 3; ++i) c.ordering[i] = loop_from_string(names[i]);
    });
  }
  check_key(path, [&] { c.validate(); });
  return c;
}

}  // namespace crag
