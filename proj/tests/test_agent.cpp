#include <algorithm>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "crag/agent.hpp"
#include "crag/config.hpp"

using namespace crag;

namespace {

const std::vector<std::string> kFacts{
    "congestion: Main Street | level: heavy | cause: stalled truck",
    "construction: Elm Street | status: lane closures until June",
    "route: Line 5 | mode: bus | stops: Central Station, Elm Street, Oak Avenue",
    "route: Line 2 | mode: metro | stops: Harbor Bridge, Market Square",
    "zoning: district R2 | max_height: 12 | max_far: 1.5 | min_setback: 3"};

json rainy_morning() {
  return json{{"time", "08:00"},
              {"weather", "rain"},
              {"traffic", {{"metro", "available"}, {"bus", "available"}, {"car", "available"}}}};
}

std::vector<KnowledgeEntry> tool_docs(const ToolRegistry& r) {
  std::vector<KnowledgeEntry> docs;
  for (const auto& [name, tool] : r.tools()) docs.push_back(tool_doc_entry(tool));
  return docs;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::InvalidArgument;
}

/// Serves a fixed completion on 127.0.0.1 for the lifetime of the object.
class FakeEndpoint {
 public:
  explicit FakeEndpoint(std::string reply) : reply_(std::move(reply)) {
    server_.Post("/complete", [this](const httplib::Request& req, httplib::Response& res) {
      last_request_ = req.body;
      res.set_content(json{{"text", reply_}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeEndpoint() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/complete"; }
  const std::string& last_request() const { return last_request_; }

 private:
  std::string reply_;
  std::string last_request_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(Registry, DefaultToolsAndDuplicates) {
  ToolRegistry r = make_default_registry();
  EXPECT_EQ(r.names(), (std::vector<std::string>{"time", "traffic", "weather"}));
  EXPECT_EQ(code_of([&] { r.add({"time", {}, {}, "again"}); }), ErrorCode::DuplicateId);
}

TEST(Plan, TravelQueryGivesFourSteps) {
  const ToolRegistry r = make_default_registry();
  const Plan p = plan("How should I travel to the stadium now?", tool_docs(r), r, {});
  ASSERT_EQ(p.steps.size(), 4u);
  EXPECT_EQ(std::get<ToolCall>(p.steps[0]).tool, "time");
  EXPECT_EQ(std::get<ToolCall>(p.steps[1]).tool, "weather");
  EXPECT_EQ(std::get<ToolCall>(p.steps[2]).tool, "traffic");
  EXPECT_TRUE(std::holds_alternative<Answer>(p.steps[3]));
}

TEST(Plan, FactualQueryQuotesFact) {
  const ToolRegistry r = make_default_registry();
  const std::vector<KnowledgeEntry> docs{fact_entry(kFacts[0])};
  const Plan p = plan("What is the congestion level on Main Street?", docs, r, {});
  ASSERT_EQ(p.steps.size(), 1u);
  EXPECT_EQ(execute(p, r, json::object()).answer, kFacts[0]);
}

TEST(Plan, UnregisteredToolAndNoRule) {
  const ToolRegistry r = make_default_registry();
  EXPECT_EQ(code_of([&] { plan("Use the parking tool near the arena", tool_docs(r), r, {}); }),
            ErrorCode::NoApplicableRule);
  EXPECT_EQ(code_of([&] { plan("What is the air quality?", {}, r, {}); }),
            ErrorCode::NoApplicableRule);
}

TEST(Execute, RainMeansCoveredTransport) {
  const ToolRegistry r = make_default_registry();
  const Plan p = plan("How should I travel to the stadium now?", tool_docs(r), r, {});
  const Execution ex = execute(p, r, rainy_morning());
  EXPECT_NE(ex.answer.find("metro"), std::string::npos);
  EXPECT_NE(ex.answer.find("Weather rain"), std::string::npos);
  ASSERT_EQ(ex.observations.size(), 3u);
  EXPECT_EQ(ex.observations[0].output.at("peak_hour"), true);
}

TEST(Execute, PeakHourWindowAndAdvice) {
  EXPECT_TRUE(is_peak_hour("08:00"));
  EXPECT_TRUE(is_peak_hour("07:00"));
  EXPECT_TRUE(is_peak_hour("09:00"));
  EXPECT_FALSE(is_peak_hour("09:01"));
  const std::vector<Observation> obs{
      {0, "time", {}, {{"peak_hour", true}}},
      {1, "weather", {}, {{"condition", "clear"}}},
      {2, "traffic", {}, {{"metro", "suspended"}, {"bus", "suspended"}, {"car", "available"},
                          {"bike", "available"}, {"walk", "available"}}}};
  EXPECT_EQ(advise(obs), "bike");
}

TEST(Execute, BindingErrors) {
  const ToolRegistry r = make_default_registry();
  EXPECT_EQ(code_of([&] { execute({{ToolCall{"time", json::object()}, Answer{"at {}"}}}, r, rainy_morning()); }),
            ErrorCode::InvalidArguments);
  EXPECT_EQ(code_of([&] { execute({{Answer{"{0.time}"}}}, r, rainy_morning()); }),
            ErrorCode::InvalidArguments);
  EXPECT_EQ(code_of([&] { execute({{ToolCall{"weather", {}}, Answer{"x"}}}, r, rainy_morning()); }),
            ErrorCode::InvalidArguments);
  EXPECT_EQ(code_of([&] {
              execute({{ToolCall{"weather", {{"location", 3}}}, Answer{"x"}}}, r, rainy_morning());
            }),
            ErrorCode::InvalidArguments);
  EXPECT_EQ(code_of([&] { execute({{ToolCall{"time", json::object()}, Answer{"x"}}}, r, json::object()); }),
            ErrorCode::ToolFailure);
  const Execution ok =
      execute({{ToolCall{"time", json::object()}, Answer{"now {0.time}, raw {{0}}"}}}, r, rainy_morning());
  EXPECT_EQ(ok.answer, "now 08:00, raw {0}");
}

TEST(AnswerQuery, MemoryWriteBackIsRetrievedOnRepeat) {
  const ToolRegistry r = make_default_registry();
  Corpus corpus = build_agent_corpus(r, kFacts);
  const auto retriever = RetrieverParams::identity(kAgentDim);
  const std::string q = "What is the congestion level on Main Street?";
  const AgentAnswer first = answer_query(q, corpus, retriever, r, {}, json::object());
  EXPECT_NE(first.answer.find(kFacts[0]), std::string::npos);
  EXPECT_EQ(first.memory, memory_id(q));
  EXPECT_FALSE(std::count(first.retrieved.begin(), first.retrieved.end(), first.memory));
  const AgentAnswer second = answer_query(q, corpus, retriever, r, {}, json::object(), 1);
  EXPECT_TRUE(std::count(second.retrieved.begin(), second.retrieved.end(), first.memory));
  EXPECT_EQ(second.answer, first.answer);
}

TEST(AnswerQuery, ConstructionCrossReference) {
  const ToolRegistry r = make_default_registry();
  Corpus corpus = build_agent_corpus(r, kFacts);
  const AgentAnswer a =
      answer_query("Which transit route is affected by the Elm Street construction?", corpus,
                   RetrieverParams::identity(kAgentDim), r, {}, json::object());
  EXPECT_NE(a.answer.find("Line 5 is affected by construction at Elm Street"), std::string::npos);
  EXPECT_EQ(a.answer.find("Line 2"), std::string::npos);
}

TEST(AnswerQuery, ZoningVerdictFollowsRuleChain) {
  const ToolRegistry r = make_default_registry();
  Corpus corpus = build_agent_corpus(r, kFacts);
  const auto retriever = RetrieverParams::identity(kAgentDim);
  const AgentAnswer ok = answer_query(
      "Is a proposal in district R2 with height 10, far 1.2 and setback 4 compliant with zoning?",
      corpus, retriever, r, {}, json::object());
  EXPECT_NE(ok.answer.find("compliant with zoning district R2"), std::string::npos);
  EXPECT_EQ(ok.answer.find("non-compliant"), std::string::npos);
  const AgentAnswer bad = answer_query(
      "Is a proposal in district R2 with height 12, far 2 and setback 3 compliant with zoning?",
      corpus, retriever, r, {}, json::object());
  EXPECT_NE(bad.answer.find("non-compliant"), std::string::npos);
  EXPECT_NE(bad.answer.find("far 2 exceeds max_far 1.5"), std::string::npos);
  EXPECT_EQ(bad.answer.find("height 12"), std::string::npos);
}

TEST(Suite, ShippedSuitePassesAndEmptyCorpusFails) {
  const AgentSuite suite =
      agent_suite_from_json(load_json_file(std::string(CRAG_SOURCE_DIR) + "/configs/agent_suite.json"));
  const ToolRegistry r = make_default_registry();
  const auto retriever = RetrieverParams::identity(kAgentDim);
  Corpus corpus = build_agent_corpus(r, suite.facts);
  const LevelReport full = run_level_suite(suite.cases, corpus, retriever, r, {});
  for (int level = 1; level <= 3; ++level) EXPECT_DOUBLE_EQ(full.rate(level), 1.0) << level;
  Corpus empty = build_agent_corpus(r, suite.facts);
  empty.clear();
  const LevelReport none = run_level_suite(suite.cases, empty, retriever, r, {});
  EXPECT_DOUBLE_EQ(none.rate(1), 0.0);
  EXPECT_FALSE(none.all_pass());
}

TEST(Suite, DeterministicAnswers) {
  const AgentSuite suite =
      agent_suite_from_json(load_json_file(std::string(CRAG_SOURCE_DIR) + "/configs/agent_suite.json"));
  const ToolRegistry r = make_default_registry();
  Corpus a = build_agent_corpus(r, suite.facts);
  Corpus b = build_agent_corpus(r, suite.facts);
  const auto ra = run_level_suite(suite.cases, a, RetrieverParams::identity(kAgentDim), r, {});
  const auto rb = run_level_suite(suite.cases, b, RetrieverParams::identity(kAgentDim), r, {});
  for (std::size_t i = 0; i < ra.outcomes.size(); ++i) {
    EXPECT_EQ(ra.outcomes[i].answer, rb.outcomes[i].answer);
  }
}

TEST(SuiteJson, Errors) {
  EXPECT_EQ(code_of([] { agent_suite_from_json(json::parse(R"({"facts": []})")); }),
            ErrorCode::ParseError);
  EXPECT_EQ(code_of([] {
              agent_suite_from_json(json::parse(R"({"cases": [{"level": 4, "query": "q",
                "expect": {"contains": ["x"]}}]})"));
            }),
            ErrorCode::ParseError);
}

TEST(PlanJson, RoundTripAndUnparseable) {
  const Plan p{{ToolCall{"weather", {{"location", "port"}}}, Answer{"{0.condition}"}}};
  EXPECT_EQ(parse_plan(plan_to_json(p).dump()), p);
  EXPECT_EQ(code_of([] { parse_plan("not json"); }), ErrorCode::UnparseablePlan);
  EXPECT_EQ(code_of([] { parse_plan(R"({"steps": [{"think": 1}]})"); }), ErrorCode::UnparseablePlan);
}

TEST(RemoteBackend, PlansThroughHttpEndpoint) {
  const Plan scripted{{ToolCall{"time", json::object()}, Answer{"It is {0.time}"}}};
  FakeEndpoint server(plan_to_json(scripted).dump());
  GeneratorBackend backend{BackendKind::RemoteText, server.url(), 5.0, 64};
  const ToolRegistry r = make_default_registry();
  Corpus corpus = build_agent_corpus(r, kFacts);
  const AgentAnswer a = answer_query("When does the bus run?", corpus,
                                     RetrieverParams::identity(kAgentDim), r, backend, rainy_morning());
  EXPECT_EQ(a.plan, scripted);
  EXPECT_EQ(a.answer, "It is 08:00");
  const json sent = json::parse(server.last_request());
  EXPECT_EQ(sent.at("max_tokens"), 64);
  EXPECT_NE(sent.at("prompt").get<std::string>().find("When does the bus run?"), std::string::npos);
}

TEST(RemoteBackend, BadReplyIsUnparseablePlan) {
  FakeEndpoint server(R"({"steps": [{"call": "teleport"}, {"answer": "x"}]})");
  GeneratorBackend backend{BackendKind::RemoteText, server.url(), 5.0, 64};
  const ToolRegistry r = make_default_registry();
  EXPECT_EQ(code_of([&] { plan("q", {}, r, backend); }), ErrorCode::UnparseablePlan);
  FakeEndpoint prose("Sure, here is a plan!");
  backend.endpoint = prose.url();
  EXPECT_EQ(code_of([&] { plan("q", {}, r, backend); }), ErrorCode::UnparseablePlan);
}

TEST(RemoteBackend, UnreachableEndpointIsBackendFailure) {
  GeneratorBackend backend{BackendKind::RemoteText, "http://127.0.0.1:1/complete", 1.0, 64};
  const ToolRegistry r = make_default_registry();
  EXPECT_EQ(code_of([&] { plan("q", {}, r, backend); }), ErrorCode::BackendFailure);
  backend.endpoint = "https://example.invalid";
  EXPECT_EQ(code_of([&] { plan("q", {}, r, backend); }), ErrorCode::BackendFailure);
}
