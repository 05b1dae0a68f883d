#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "crag/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"crag: continual retrieval-augmented multilevel optimization"};
  app.require_subcommand(1);

  std::string config;
  std::string out_dir;
  std::string endpoint;
  std::string kind;
  bool empty_corpus = false;

  auto* run = app.add_subcommand("run", "simulate a scenario and write metrics, ticks, model, corpus");
  run->add_option("--config", config, "scenario JSON")->required();
  run->add_option("--out", out_dir, "output directory (overrides output_dir)");

  auto* solve = app.add_subcommand("solve", "run a solver demo and write its trace");
  solve->add_option("kind", kind, "bilevel | trilevel | moe | nested")
      ->required()
      ->check(CLI::IsMember({"bilevel", "trilevel", "moe", "nested"}));
  solve->add_option("--config", config, "solver JSON")->required();
  solve->add_option("--out", out_dir, "output directory (overrides output_dir)");

  auto* agent = app.add_subcommand("agent", "run the level suite");
  agent->add_option("--config", config, "case file JSON")->required();
  agent->add_flag("--empty-corpus", empty_corpus, "clear the corpus before running");
  agent->add_option("--endpoint-override", endpoint, "remote generation endpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : crag::kExitConfig;
  }

  const auto out = out_dir.empty() ? std::nullopt : std::optional<std::filesystem::path>(out_dir);
  if (*run) return crag::cmd_run(config, out, std::cout, std::cerr);
  if (*solve) return crag::cmd_solve(kind, config, out, std::cout, std::cerr);
  const auto ep = endpoint.empty() ? std::nullopt : std::optional<std::string>(endpoint);
  return crag::cmd_agent(config, empty_corpus, ep, std::cout, std::cerr);
}
