#pragma once

// Scenario and solver-demo configs read from JSON files.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "crag/corpus.hpp"
#include "crag/dro.hpp"
#include "crag/json_util.hpp"
#include "crag/moe.hpp"
#include "crag/nested.hpp"
#include "crag/scheduler.hpp"
#include "crag/stream.hpp"
#include "crag/toys.hpp"

namespace crag {

inline nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::ParseError, "cannot open config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, "config '" + path.string() + "' is not valid JSON: " +
                                           e.what());
  }
}

inline SolverConfig solver_config_from_json(const nlohmann::json& j, const std::string& path,
                                            SolverConfig c = {}) {
  if (!j.is_object()) return c;
  c.outer_steps = get_key<std::size_t>(j, "outer_steps", path, c.outer_steps);
  c.inner_steps = get_key<std::size_t>(j, "inner_steps", path, c.inner_steps);
  c.unroll_depth = get_key<std::size_t>(j, "unroll_depth", path, c.unroll_depth);
  c.tolerance = get_key<double>(j, "tolerance", path, c.tolerance);
  c.seed = get_key<std::uint64_t>(j, "seed", path, c.seed);
  if (j.contains("lr")) {
    if (j.at("lr").is_number()) {
      c.lr = {get_key<double>(j, "lr", path)};
    } else {
      c.lr = get_key<std::vector<double>>(j, "lr", path);
    }
  }
  check_key(path, [&] { c.validate(); });
  return c;
}

inline CorpusConfig corpus_config_from_json(const nlohmann::json& j, const std::string& path,
                                            CorpusConfig c) {
  if (!j.is_object()) return c;
  c.dim = get_key<std::size_t>(j, "dim", path, c.dim);
  c.half_life = get_key<double>(j, "half_life", path, c.half_life);
  c.redundancy_threshold = get_key<double>(j, "redundancy_threshold", path, c.redundancy_threshold);
  c.relevance_floor = get_key<double>(j, "relevance_floor", path, c.relevance_floor);
  c.capacity = get_key<std::size_t>(j, "capacity", path, c.capacity);
  check_key(path, [&] { c.validate(); });
  return c;
}

struct ScenarioConfig {
  StreamConfig stream;
  CorpusConfig corpus;
  TimescaleConfig timescale;
  SchedulerOptions options;
  std::size_t hidden = 16;
  double alpha = 0.7;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
};

inline ScenarioConfig scenario_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::ParseError, "config must be a JSON object");
  ScenarioConfig c;
  c.seed = get_key<std::uint64_t>(j, "seed", "");
  c.output_dir = get_key<std::string>(j, "output_dir", "", c.output_dir);
  const nlohmann::json empty = nlohmann::json::object();
  c.stream = stream_config_from_json(j.value("stream", empty), "stream");
  c.stream.seed = c.seed;
  CorpusConfig base;
  base.dim = c.stream.dim;
  base.redundancy_threshold = c.stream.redundancy_threshold;
  c.corpus = corpus_config_from_json(j.value("corpus", empty), "corpus", base);
  require(c.corpus.dim == c.stream.dim, ErrorCode::ParseError,
          "config key 'corpus.dim' must equal stream.dim (" + std::to_string(c.stream.dim) + ")");
  require(c.corpus.redundancy_threshold == c.stream.redundancy_threshold, ErrorCode::ParseError,
          "config key 'corpus.redundancy_threshold' must equal stream.redundancy_threshold");
  c.timescale = timescale_config_from_json(j.value("timescale", empty), "timescale");

  const nlohmann::json& s = j.value("scheduler", empty);
  c.options.k = get_key<std::size_t>(s, "k", "scheduler", c.options.k);
  c.options.retriever_lr = get_key<double>(s, "retriever_lr", "scheduler", c.options.retriever_lr);
  c.options.finetune.lr = get_key<double>(s, "finetune_lr", "scheduler", c.options.finetune.lr);
  c.options.finetune.lambda_reg =
      get_key<double>(s, "lambda_reg", "scheduler", c.options.finetune.lambda_reg);
  c.options.replay_ticks = get_key<std::size_t>(s, "replay_ticks", "scheduler", c.options.replay_ticks);
  c.options.fusion.attn_temperature =
      get_key<double>(s, "attn_temperature", "scheduler", c.options.fusion.attn_temperature);
  require(c.options.k >= 1, ErrorCode::ParseError, "config key 'scheduler.k' must be >= 1");
  require(c.options.retriever_lr > 0.0, ErrorCode::ParseError,
          "config key 'scheduler.retriever_lr' must be > 0");
  require(c.options.finetune.lambda_reg >= 0.0, ErrorCode::ParseError,
          "config key 'scheduler.lambda_reg' must be >= 0");
  require(c.options.replay_ticks >= 1, ErrorCode::ParseError,
          "config key 'scheduler.replay_ticks' must be >= 1");

  const nlohmann::json& m = j.value("model", empty);
  c.hidden = get_key<std::size_t>(m, "hidden", "model", c.hidden);
  c.alpha = get_key<double>(m, "alpha", "model", c.alpha);
  require(c.hidden >= 1, ErrorCode::ParseError, "config key 'model.hidden' must be >= 1");
  require(c.alpha >= 0.0 && c.alpha <= 1.0, ErrorCode::ParseError,
          "config key 'model.alpha' must be in [0, 1]");
  return c;
}

/// Initial state for a scenario: identity projection, random generator.
inline ModelState initial_state(const ScenarioConfig& c) {
  std::mt19937_64 rng(c.seed ^ 0x90deULL);
  ModelState s;
  s.retriever = RetrieverParams::identity(c.stream.dim, c.alpha);
  s.generator = GeneratorParams::random(2 * c.stream.dim, c.hidden, c.stream.output_dim, rng);
  s.weights = DomainWeights::uniform(c.stream.domains.size());
  return s;
}

inline RagToyConfig rag_toy_config_from_json(const nlohmann::json& j, const std::string& path,
                                             std::uint64_t seed) {
  RagToyConfig c;
  c.seed = seed;
  if (!j.is_object()) return c;
  c.dim = get_key<std::size_t>(j, "dim", path, c.dim);
  c.domains = get_key<std::size_t>(j, "domains", path, c.domains);
  c.samples_per_domain = get_key<std::size_t>(j, "samples_per_domain", path, c.samples_per_domain);
  c.val_per_domain = get_key<std::size_t>(j, "val_per_domain", path, c.val_per_domain);
  c.entries_per_domain = get_key<std::size_t>(j, "entries_per_domain", path, c.entries_per_domain);
  c.hidden = get_key<std::size_t>(j, "hidden", path, c.hidden);
  c.output_dim = get_key<std::size_t>(j, "output_dim", path, c.output_dim);
  c.k = get_key<std::size_t>(j, "k", path, c.k);
  c.spread = get_key<double>(j, "spread", path, c.spread);
  c.label_noise = get_key<std::vector<double>>(j, "label_noise", path, c.label_noise);
  c.alpha = get_key<double>(j, "alpha", path, c.alpha);
  require(c.domains >= 1, ErrorCode::ParseError, "config key '" + join_key(path, "domains") +
                                                     "' must be >= 1");
  require(c.dim >= 2, ErrorCode::ParseError, "config key '" + join_key(path, "dim") +
                                                 "' must be >= 2");
  return c;
}

inline MoeToyConfig moe_toy_config_from_json(const nlohmann::json& j, const std::string& path,
                                             std::uint64_t seed) {
  MoeToyConfig c;
  c.seed = seed;
  if (!j.is_object()) return c;
  c.per_cluster = get_key<std::size_t>(j, "per_cluster", path, c.per_cluster);
  c.experts = get_key<std::size_t>(j, "experts", path, c.experts);
  c.separation = get_key<double>(j, "separation", path, c.separation);
  c.noise = get_key<double>(j, "noise", path, c.noise);
  require(c.experts >= 1, ErrorCode::ParseError,
          "config key '" + join_key(path, "experts") + "' must be >= 1");
  return c;
}

inline MoeSolverConfig moe_solver_config_from_json(const nlohmann::json& j, const std::string& path) {
  MoeSolverConfig c;
  if (!j.is_object()) return c;
  c.outer_steps = get_key<std::size_t>(j, "outer_steps", path, c.outer_steps);
  c.inner_steps = get_key<std::size_t>(j, "inner_steps", path, c.inner_steps);
  c.unroll_depth = get_key<std::size_t>(j, "unroll_depth", path, c.unroll_depth);
  c.lr_inner = get_key<double>(j, "lr_inner", path, c.lr_inner);
  c.lr_outer = get_key<double>(j, "lr_outer", path, c.lr_outer);
  c.holdout_every = get_key<std::size_t>(j, "holdout_every", path, c.holdout_every);
  require(c.outer_steps >= 1 && c.inner_steps >= 1 && c.unroll_depth >= 1, ErrorCode::ParseError,
          "config key '" + path + "': step counts must be >= 1");
  return c;
}

inline RoutingConfig routing_config_from_json(const nlohmann::json& j, const std::string& path) {
  RoutingConfig c;
  if (!j.is_object()) return c;
  c.entropy_coef = get_key<double>(j, "entropy_coef", path, c.entropy_coef);
  c.balance_coef = get_key<double>(j, "balance_coef", path, c.balance_coef);
  c.sparsity_coef = get_key<double>(j, "sparsity_coef", path, c.sparsity_coef);
  check_key(path, [&] { c.validate(); });
  return c;
}

}  // namespace crag
