#pragma once

// Plan-and-execute agent over the retrieval stack. Tool documentation, facts
// and query-answer memory all live in the corpus. The mock planner is a fixed
// rule table; the remote planner asks an HTTP text endpoint for a JSON plan.

#include <algorithm>
#include <array>
#include <cctype>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <variant>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "crag/core.hpp"
#include "crag/corpus.hpp"
#include "crag/encoder.hpp"
#include "crag/json_util.hpp"
#include "crag/retrieval.hpp"

namespace crag {

using json = nlohmann::json;

enum class FieldType { String, Integer, Real };

struct ToolField {
  std::string name;
  FieldType type = FieldType::String;
};

/// Scripted world state the mock tools read from.
using AgentState = json;

struct Tool {
  std::string name;
  std::vector<ToolField> schema;
  std::function<json(const json& args, const AgentState& state)> eval;
  std::string description;
};

class ToolRegistry {
 public:
  void add(Tool tool) {
    require(!tool.name.empty(), ErrorCode::InvalidArgument, "tool name must be nonempty");
    require(!tools_.contains(tool.name), ErrorCode::DuplicateId,
            "tool '" + tool.name + "' already registered");
    tools_.emplace(tool.name, std::move(tool));
  }

  const Tool* find(const std::string& name) const {
    auto it = tools_.find(name);
    return it == tools_.end() ? nullptr : &it->second;
  }

  bool empty() const { return tools_.empty(); }
  std::size_t size() const { return tools_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : tools_) out.push_back(name);
    return out;
  }

  const std::map<std::string, Tool>& tools() const { return tools_; }

 private:
  std::map<std::string, Tool> tools_;
};

inline constexpr std::size_t kAgentDim = 64;
inline const std::array<std::string, 5> kModePreference{"metro", "bus", "car", "bike", "walk"};

/// "HH:MM" to minutes past midnight.
inline int parse_clock(const std::string& s) {
  static const std::regex re(R"(^(\d{1,2}):(\d{2})$)");
  std::smatch m;
  require(std::regex_match(s, m, re), ErrorCode::ToolFailure, "bad clock value '" + s + "'");
  const int h = std::stoi(m[1]);
  const int min = std::stoi(m[2]);
  require(h < 24 && min < 60, ErrorCode::ToolFailure, "bad clock value '" + s + "'");
  return h * 60 + min;
}

inline bool is_peak_hour(const std::string& clock) {
  const int t = parse_clock(clock);
  return t >= 7 * 60 && t <= 9 * 60;
}

inline const json& state_field(const AgentState& state, const std::string& key) {
  require(state.is_object() && state.contains(key), ErrorCode::ToolFailure,
          "scripted state has no '" + key + "'");
  return state.at(key);
}

inline ToolRegistry make_default_registry() {
  ToolRegistry r;
  r.add({"time",
         {},
         [](const json&, const AgentState& s) {
           const auto clock = state_field(s, "time").get<std::string>();
           return json{{"time", clock}, {"peak_hour", is_peak_hour(clock)}};
         },
         "time tool: returns the current local time and whether it is peak hour for travel and "
         "commute planning"});
  r.add({"weather",
         {{"location", FieldType::String}},
         [](const json& args, const AgentState& s) {
           return json{{"location", args.at("location")},
                       {"condition", state_field(s, "weather").get<std::string>()}};
         },
         "weather tool: returns current weather conditions such as rain or clear at a location "
         "for travel and commute planning"});
  r.add({"traffic",
         {{"area", FieldType::String}},
         [](const json& args, const AgentState& s) {
           const json& modes = state_field(s, "traffic");
           json out{{"area", args.at("area")}};
           for (const auto& mode : kModePreference) {
             out[mode] = modes.contains(mode) ? modes.at(mode).get<std::string>() : "available";
           }
           return out;
         },
         "traffic tool: returns availability of metro, bus, car, bike and walk transport modes "
         "in an area for travel and commute planning"});
  return r;
}

// ---------------------------------------------------------------------------
// Corpus entries

inline const std::string kToolDocSource = "tool-doc";
inline const std::string kFactSource = "kb";
inline const std::string kMemorySource = "memory";
inline const std::string kToolDomain = "tools";

inline KnowledgeEntry make_entry(const std::string& tag, const std::string& text,
                                 const std::string& domain, const std::string& source, Tick now,
                                 const std::string& embed_text) {
  return {fnv1a(tag + ":" + text), encode(embed_text, kAgentDim), text, domain, {}, now, now, 0.0,
          source};
}

inline KnowledgeEntry tool_doc_entry(const Tool& t, Tick now = 0) {
  return make_entry("tool", t.name, kToolDomain, kToolDocSource, now, t.description);
}

inline KnowledgeEntry fact_entry(const std::string& text, Tick now = 0) {
  return make_entry("kb", text, "", kFactSource, now, text);
}

inline EntryId memory_id(const std::string& query) { return fnv1a("memory:" + query); }

inline void index_tool_docs(Corpus& corpus, const ToolRegistry& registry, Tick now = 0) {
  for (const auto& [name, tool] : registry.tools()) corpus.ingest(tool_doc_entry(tool, now), now);
}

/// "key: value | key: value" payloads. Keys keep their order of appearance.
inline std::vector<std::pair<std::string, std::string>> parse_fact(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t bar = text.find('|', start);
    const std::string part = text.substr(start, bar == std::string::npos ? bar : bar - start);
    const std::size_t colon = part.find(':');
    if (colon != std::string::npos) {
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(' ');
        const auto e = s.find_last_not_of(' ');
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      out.emplace_back(trim(part.substr(0, colon)), trim(part.substr(colon + 1)));
    }
    if (bar == std::string::npos) break;
    start = bar + 1;
  }
  return out;
}

inline std::optional<std::string> fact_value(const std::string& text, const std::string& key) {
  for (const auto& [k, v] : parse_fact(text)) {
    if (k == key) return v;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Plans

struct ToolCall {
  std::string tool;
  json args = json::object();
  bool operator==(const ToolCall&) const = default;
};

/// Template over prior outputs: {N} the whole output of step N, {N.field} one
/// field, {advice} the transport recommendation.
struct Answer {
  std::string template_text;
  bool operator==(const Answer&) const = default;
};

using PlanStep = std::variant<ToolCall, Answer>;

struct Plan {
  std::vector<PlanStep> steps;
  bool operator==(const Plan&) const = default;
};

enum class BackendKind { MockRules, RemoteText };

struct GeneratorBackend {
  BackendKind kind = BackendKind::MockRules;
  std::string endpoint;
  double timeout_s = 30.0;
  int max_tokens = 512;
};

struct Observation {
  std::size_t step = 0;
  std::string tool;
  json args;
  json output;
};

struct Execution {
  std::vector<Observation> observations;
  std::string answer;
};

namespace agent_detail {

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline bool mentions(const std::string& text, std::initializer_list<const char*> words) {
  const std::string t = lower(text);
  return std::any_of(words.begin(), words.end(),
                     [&](const char* w) { return t.find(w) != std::string::npos; });
}

inline std::string render(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

/// Destination phrase after " to ", else "city".
inline std::string destination(const std::string& query) {
  static const std::regex re(R"(\bto (?:the )?([A-Za-z][A-Za-z ]*?)(?:[?.!,]|$| now| at| during))");
  std::smatch m;
  if (std::regex_search(query, m, re)) return m[1];
  return "city";
}

struct Proposal {
  std::optional<double> height;
  std::optional<double> far;
  std::optional<double> setback;
};

inline Proposal parse_proposal(const std::string& query) {
  Proposal p;
  static const std::regex re(R"(\b(height|far|setback)\s*(?:of|=|:)?\s*([0-9]+(?:\.[0-9]+)?))",
                             std::regex::icase);
  const std::string q = lower(query);
  for (auto it = std::sregex_iterator(q.begin(), q.end(), re); it != std::sregex_iterator(); ++it) {
    const std::string key = (*it)[1];
    const double value = std::stod((*it)[2]);
    if (key == "height") p.height = value;
    if (key == "far") p.far = value;
    if (key == "setback") p.setback = value;
  }
  return p;
}

inline std::string number(double x) {
  std::string s = std::to_string(x);
  s.erase(s.find_last_not_of('0') + 1);
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

inline std::vector<const KnowledgeEntry*> facts(const std::vector<KnowledgeEntry>& docs) {
  std::vector<const KnowledgeEntry*> out;
  for (const auto& d : docs) {
    if (d.source == kFactSource) out.push_back(&d);
  }
  return out;
}

inline std::string trim_copy(const std::string& s) {
  const auto b = s.find_first_not_of(' ');
  const auto e = s.find_last_not_of(' ');
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

// Level-3: every regulation limit applicable to the district in the query.
inline std::optional<std::string> zoning_verdict(const std::string& query,
                                                 const std::vector<const KnowledgeEntry*>& kb) {
  const std::string q = lower(query);
  for (const KnowledgeEntry* f : kb) {
    const auto district = fact_value(f->text, "zoning");
    if (!district || q.find(lower(*district)) == std::string::npos) continue;
    const Proposal p = parse_proposal(query);
    std::vector<std::string> violations;
    auto limit = [&](const char* key) -> std::optional<double> {
      if (auto v = fact_value(f->text, key)) return std::stod(*v);
      return std::nullopt;
    };
    if (auto h = limit("max_height"); h && p.height && *p.height > *h) {
      violations.push_back("height " + number(*p.height) + " exceeds max_height " + number(*h));
    }
    if (auto r = limit("max_far"); r && p.far && *p.far > *r) {
      violations.push_back("far " + number(*p.far) + " exceeds max_far " + number(*r));
    }
    if (auto s = limit("min_setback"); s && p.setback && *p.setback < *s) {
      violations.push_back("setback " + number(*p.setback) + " below min_setback " + number(*s));
    }
    if (violations.empty()) return "compliant with zoning " + *district;
    std::string out = "non-compliant with zoning " + *district + ": ";
    for (std::size_t i = 0; i < violations.size(); ++i) out += (i ? "; " : "") + violations[i];
    return out;
  }
  return std::nullopt;
}

// Level-2: a construction location that appears among a route's stops.
inline std::optional<std::string> construction_impact(const std::vector<const KnowledgeEntry*>& kb) {
  for (const KnowledgeEntry* c : kb) {
    const auto site = fact_value(c->text, "construction");
    if (!site) continue;
    for (const KnowledgeEntry* r : kb) {
      const auto route = fact_value(r->text, "route");
      const auto stops = fact_value(r->text, "stops");
      if (!route || !stops) continue;
      std::size_t start = 0;
      while (start <= stops->size()) {
        const std::size_t comma = stops->find(',', start);
        const std::string stop = trim_copy(stops->substr(start, comma - start));
        if (lower(stop) == lower(*site)) {
          return *route + " is affected by construction at " + *site;
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
    }
  }
  return std::nullopt;
}

inline std::string escape_braces(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '{') out += "{{";
    else if (c == '}') out += "}}";
    else out += c;
  }
  return out;
}

inline Plan mock_plan(const std::string& query, const std::vector<KnowledgeEntry>& docs,
                      const ToolRegistry& registry) {
  static const std::regex tool_re(R"(\b([a-z_]+) tool\b)");
  const std::string q = lower(query);
  for (auto it = std::sregex_iterator(q.begin(), q.end(), tool_re); it != std::sregex_iterator();
       ++it) {
    const std::string name = (*it)[1];
    require(registry.find(name) != nullptr, ErrorCode::NoApplicableRule,
            "no tool named '" + name + "' is registered");
  }

  if (mentions(query, {"travel", "commute", "trip", "get to", "go to", "head to"})) {
    Plan plan;
    std::map<std::string, std::size_t> index;
    for (const char* name : {"time", "weather", "traffic"}) {
      const bool documented = std::any_of(docs.begin(), docs.end(), [&](const KnowledgeEntry& d) {
        return d.source == kToolDocSource && d.text == name;
      });
      if (!documented || registry.find(name) == nullptr) continue;
      index[name] = plan.steps.size();
      json args = json::object();
      if (std::string(name) == "weather") args["location"] = destination(query);
      if (std::string(name) == "traffic") args["area"] = destination(query);
      plan.steps.emplace_back(ToolCall{name, args});
    }
    if (!plan.steps.empty()) {
      std::string tmpl;
      if (index.contains("time")) tmpl += "Time {" + std::to_string(index["time"]) + ".time}. ";
      if (index.contains("weather")) {
        tmpl += "Weather {" + std::to_string(index["weather"]) + ".condition}. ";
      }
      tmpl += "Recommended mode: {advice}.";
      plan.steps.emplace_back(Answer{tmpl});
      return plan;
    }
  }

  const auto kb = facts(docs);
  if (mentions(query, {"zoning", "compliant", "proposal"})) {
    if (auto verdict = zoning_verdict(query, kb)) return {{Answer{escape_braces(*verdict)}}};
  }
  if (mentions(query, {"affected", "affect", "impact"})) {
    if (auto impact = construction_impact(kb)) return {{Answer{escape_braces(*impact)}}};
  }
  if (!kb.empty()) return {{Answer{escape_braces(kb.front()->text)}}};
  throw Error(ErrorCode::NoApplicableRule, "no rule applies to query '" + query + "'");
}

inline std::string build_prompt(const std::string& query, const std::vector<KnowledgeEntry>& docs,
                                const ToolRegistry& registry) {
  std::string p = "You are a planner. Reply with JSON {\"steps\": [...]} where each step is "
                  "{\"call\": <tool>, \"args\": {...}} or a final {\"answer\": <template>}. "
                  "Templates may reference {N} or {N.field} of earlier steps.\nTools:\n";
  for (const auto& [name, tool] : registry.tools()) {
    p += "- " + name + "(";
    for (std::size_t i = 0; i < tool.schema.size(); ++i) {
      p += (i ? ", " : "") + tool.schema[i].name;
    }
    p += "): " + tool.description + "\n";
  }
  p += "Context:\n";
  for (const auto& d : docs) p += "- " + d.text + "\n";
  p += "Query: " + query + "\n";
  return p;
}

struct Endpoint {
  std::string host;  // scheme://host:port
  std::string path;
};

inline Endpoint split_endpoint(const std::string& url) {
  static const std::regex re(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  require(std::regex_match(url, m, re), ErrorCode::BackendFailure,
          "endpoint must look like http://host[:port][/path], got '" + url + "'");
  return {m[1], m[2].matched ? std::string(m[2]) : std::string("/")};
}

}  // namespace agent_detail

inline Plan parse_plan(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::UnparseablePlan, std::string("plan is not valid JSON: ") + e.what());
  }
  require(j.is_object() && j.contains("steps") && j["steps"].is_array(), ErrorCode::UnparseablePlan,
          "plan must be an object with a steps array");
  Plan plan;
  for (const json& s : j["steps"]) {
    if (s.is_object() && s.contains("call") && s["call"].is_string()) {
      const json args = s.value("args", json::object());
      require(args.is_object(), ErrorCode::UnparseablePlan, "step args must be an object");
      plan.steps.emplace_back(ToolCall{s["call"].get<std::string>(), args});
    } else if (s.is_object() && s.contains("answer") && s["answer"].is_string()) {
      plan.steps.emplace_back(Answer{s["answer"].get<std::string>()});
    } else {
      throw Error(ErrorCode::UnparseablePlan, "unrecognized plan step " + s.dump());
    }
  }
  return plan;
}

inline json plan_to_json(const Plan& plan) {
  json steps = json::array();
  for (const PlanStep& s : plan.steps) {
    if (const auto* c = std::get_if<ToolCall>(&s)) {
      steps.push_back({{"call", c->tool}, {"args", c->args}});
    } else {
      steps.push_back({{"answer", std::get<Answer>(s).template_text}});
    }
  }
  return {{"steps", steps}};
}

/// Structural check: nonempty, ends with an Answer, tools registered.
inline void validate_plan(const Plan& plan, const ToolRegistry& registry, ErrorCode code) {
  require(!plan.steps.empty(), code, "plan has no steps");
  require(std::holds_alternative<Answer>(plan.steps.back()), code, "plan must end with an Answer");
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    if (const auto* c = std::get_if<ToolCall>(&plan.steps[i])) {
      require(registry.find(c->tool) != nullptr, code,
              "step " + std::to_string(i) + " calls unknown tool '" + c->tool + "'");
    }
  }
}

inline std::string remote_complete(const GeneratorBackend& backend, const std::string& prompt) {
  const auto ep = agent_detail::split_endpoint(backend.endpoint);
  httplib::Client client(ep.host);
  const auto secs = static_cast<time_t>(backend.timeout_s);
  const auto usecs = static_cast<time_t>((backend.timeout_s - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  const json body{{"prompt", prompt}, {"max_tokens", backend.max_tokens}};
  auto res = client.Post(ep.path, body.dump(), "application/json");
  require(static_cast<bool>(res), ErrorCode::BackendFailure,
          "request to " + backend.endpoint + " failed: " + httplib::to_string(res.error()));
  require(res->status == 200, ErrorCode::BackendFailure,
          "endpoint returned HTTP " + std::to_string(res->status));
  try {
    const json reply = json::parse(res->body);
    return reply.at("text").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BackendFailure, std::string("malformed endpoint reply: ") + e.what());
  }
}

inline Plan plan(const std::string& query, const std::vector<KnowledgeEntry>& docs,
                 const ToolRegistry& registry, const GeneratorBackend& backend) {
  require(!registry.empty(), ErrorCode::InvalidArgument, "plan: tool registry is empty");
  if (backend.kind == BackendKind::MockRules) {
    Plan p = agent_detail::mock_plan(query, docs, registry);
    validate_plan(p, registry, ErrorCode::NoApplicableRule);
    return p;
  }
  const std::string text =
      remote_complete(backend, agent_detail::build_prompt(query, docs, registry));
  Plan p = parse_plan(text);
  validate_plan(p, registry, ErrorCode::UnparseablePlan);
  return p;
}

inline void validate_args(const Tool& tool, const json& args, std::size_t step) {
  const std::string where = "step " + std::to_string(step) + " (" + tool.name + "): ";
  require(args.is_object(), ErrorCode::InvalidArguments, where + "arguments must be an object");
  for (const auto& [key, value] : args.items()) {
    const bool known = std::any_of(tool.schema.begin(), tool.schema.end(),
                                   [&](const ToolField& f) { return f.name == key; });
    require(known, ErrorCode::InvalidArguments, where + "unexpected argument '" + key + "'");
  }
  for (const ToolField& f : tool.schema) {
    require(args.contains(f.name), ErrorCode::InvalidArguments,
            where + "missing argument '" + f.name + "'");
    const json& v = args.at(f.name);
    const bool ok = (f.type == FieldType::String && v.is_string()) ||
                    (f.type == FieldType::Integer && v.is_number_integer()) ||
                    (f.type == FieldType::Real && v.is_number());
    require(ok, ErrorCode::InvalidArguments, where + "argument '" + f.name + "' has wrong type");
  }
}

/// Transport mode from bound tool outputs: first mode in preference order
/// that is available, covered when wet, and not a car at peak hour.
inline std::string advise(const std::vector<Observation>& obs) {
  bool wet = false;
  bool peak = false;
  const json* traffic = nullptr;
  for (const Observation& o : obs) {
    if (o.tool == "weather") {
      const std::string c = agent_detail::lower(o.output.value("condition", ""));
      wet = c == "rain" || c == "snow" || c == "storm";
    } else if (o.tool == "time") {
      peak = o.output.value("peak_hour", false);
    } else if (o.tool == "traffic") {
      traffic = &o.output;
    }
  }
  for (const std::string& mode : kModePreference) {
    if (wet && (mode == "bike" || mode == "walk")) continue;
    if (peak && mode == "car") continue;
    if (traffic != nullptr && traffic->value(mode, "available") != "available") continue;
    return mode;
  }
  return "no suitable mode";
}

inline std::string substitute(const std::string& tmpl, const std::vector<Observation>& obs,
                              std::size_t step) {
  const std::string where = "step " + std::to_string(step) + ": ";
  std::string out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    const char c = tmpl[i];
    if (c == '{' && i + 1 < tmpl.size() && tmpl[i + 1] == '{') {
      out += '{';
      ++i;
      continue;
    }
    if (c == '}' && i + 1 < tmpl.size() && tmpl[i + 1] == '}') {
      out += '}';
      ++i;
      continue;
    }
    if (c != '{') {
      out += c;
      continue;
    }
    const std::size_t close = tmpl.find('}', i);
    require(close != std::string::npos, ErrorCode::InvalidArguments, where + "unclosed reference");
    const std::string ref = tmpl.substr(i + 1, close - i - 1);
    i = close;
    require(!ref.empty(), ErrorCode::InvalidArguments, where + "empty binding reference");
    if (ref == "advice") {
      out += advise(obs);
      continue;
    }
    static const std::regex re(R"(^(\d+)(?:\.([A-Za-z_]+))?$)");
    std::smatch m;
    require(std::regex_match(ref, m, re), ErrorCode::InvalidArguments,
            where + "bad binding reference '{" + ref + "}'");
    const std::size_t idx = std::stoul(m[1]);
    const auto bound = std::find_if(obs.begin(), obs.end(),
                                    [&](const Observation& o) { return o.step == idx; });
    require(idx < step && bound != obs.end(), ErrorCode::InvalidArguments,
            where + "reference to step " + std::to_string(idx) + " which has no output");
    if (m[2].matched) {
      const std::string field = m[2];
      require(bound->output.contains(field), ErrorCode::InvalidArguments,
              where + "step " + std::to_string(idx) + " has no field '" + field + "'");
      out += agent_detail::render(bound->output.at(field));
    } else {
      out += agent_detail::render(bound->output);
    }
  }
  return out;
}

inline Execution execute(const Plan& plan, const ToolRegistry& registry, const AgentState& state) {
  validate_plan(plan, registry, ErrorCode::InvalidArguments);
  Execution ex;
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    if (const auto* call = std::get_if<ToolCall>(&plan.steps[i])) {
      const Tool& tool = *registry.find(call->tool);
      validate_args(tool, call->args, i);
      json output;
      try {
        output = tool.eval(call->args, state);
      } catch (const std::exception& e) {
        throw Error(ErrorCode::ToolFailure,
                    "step " + std::to_string(i) + " (" + tool.name + "): " + e.what());
      }
      ex.observations.push_back({i, tool.name, call->args, std::move(output)});
    } else {
      ex.answer = substitute(std::get<Answer>(plan.steps[i]).template_text, ex.observations, i);
    }
  }
  return ex;
}

struct AgentConfig {
  std::size_t k = 5;
  std::size_t tool_k = 3;
};

struct AgentAnswer {
  std::string answer;
  std::vector<EntryId> retrieved;   // knowledge retrieval, rank order
  std::vector<EntryId> tool_docs;   // tool documentation retrieval
  Plan plan;
  Execution execution;
  EntryId memory = 0;
};

/// Retrieves knowledge and tool documentation, plans, executes, and writes the
/// (query, answer) pair back into the corpus as memory.
inline AgentAnswer answer_query(const std::string& query, Corpus& corpus,
                                const RetrieverParams& retriever, const ToolRegistry& registry,
                                const GeneratorBackend& backend, const AgentState& state,
                                Tick now = 0, const AgentConfig& cfg = {}) {
  AgentAnswer out;
  const Vec emb = encode(query, corpus.config().dim);
  std::vector<KnowledgeEntry> docs;
  auto collect = [&](const RetrievedSet& set, std::vector<EntryId>& ids) {
    for (const auto& item : set.items) {
      ids.push_back(item.id);
      if (std::none_of(docs.begin(), docs.end(),
                       [&](const KnowledgeEntry& d) { return d.id == item.id; })) {
        docs.push_back(*corpus.find(item.id));
      }
    }
  };
  if (corpus.size() > 0) {
    collect(retrieve_topk({query, emb, {"agent", "", {}}, now}, cfg.k, corpus, retriever),
            out.retrieved);
    bool any_docs = false;
    corpus.for_each([&](const KnowledgeEntry& e) { any_docs |= e.source == kToolDocSource; });
    if (any_docs) {
      collect(retrieve_topk({query, emb, {"agent", kToolDomain, {}}, now}, cfg.tool_k, corpus,
                            retriever),
              out.tool_docs);
    }
  }
  out.plan = plan(query, docs, registry, backend);
  out.execution = execute(out.plan, registry, state);
  out.answer = out.execution.answer;

  KnowledgeEntry memory{memory_id(query), emb, "query: " + query + " | answer: " + out.answer, "",
                        {}, now, now, 0.0, kMemorySource};
  const IngestResult r = corpus.ingest(memory, now);
  out.memory = r.id;
  return out;
}

// ---------------------------------------------------------------------------
// Level suite

struct AnswerPredicate {
  std::vector<std::string> contains;
  std::vector<std::string> excludes;
  std::optional<std::string> exact;

  bool operator()(const std::string& answer) const {
    if (exact && answer != *exact) return false;
    for (const auto& s : contains) {
      if (answer.find(s) == std::string::npos) return false;
    }
    for (const auto& s : excludes) {
      if (answer.find(s) != std::string::npos) return false;
    }
    return true;
  }
};

struct TaskCase {
  int level = 1;
  std::string query;
  AgentState state = json::object();
  AnswerPredicate expected;
};

struct CaseOutcome {
  int level = 1;
  std::string query;
  bool passed = false;
  std::string answer;
  std::string error;
};

struct LevelReport {
  std::array<std::size_t, 3> passed{};
  std::array<std::size_t, 3> total{};
  std::vector<CaseOutcome> outcomes;

  double rate(int level) const {
    const auto i = static_cast<std::size_t>(level - 1);
    return total[i] == 0 ? 0.0 : static_cast<double>(passed[i]) / static_cast<double>(total[i]);
  }

  bool all_pass() const { return passed == total; }
};

/// Runs every case in order against the shared corpus; a pipeline error fails
/// that case only.
inline LevelReport run_level_suite(const std::vector<TaskCase>& cases, Corpus& corpus,
                                   const RetrieverParams& retriever, const ToolRegistry& registry,
                                   const GeneratorBackend& backend, const AgentConfig& cfg = {}) {
  LevelReport report;
  for (const TaskCase& c : cases) {
    require(c.level >= 1 && c.level <= 3, ErrorCode::InvalidArgument,
            "case level must be 1, 2 or 3");
  }
  for (int level = 1; level <= 3; ++level) {
    require(std::any_of(cases.begin(), cases.end(), [&](const TaskCase& c) { return c.level == level; }),
            ErrorCode::InvalidArgument, "suite has no level-" + std::to_string(level) + " case");
  }
  Tick now = 0;
  for (const TaskCase& c : cases) {
    CaseOutcome o{c.level, c.query, false, {}, {}};
    try {
      const AgentAnswer a =
          answer_query(c.query, corpus, retriever, registry, backend, c.state, now, cfg);
      o.answer = a.answer;
      o.passed = c.expected(a.answer);
    } catch (const Error& e) {
      o.error = e.what();
    }
    const auto i = static_cast<std::size_t>(c.level - 1);
    ++report.total[i];
    if (o.passed) ++report.passed[i];
    report.outcomes.push_back(std::move(o));
  }
  return report;
}

struct AgentSuite {
  std::vector<std::string> facts;
  std::vector<TaskCase> cases;
};

inline AgentSuite agent_suite_from_json(const json& j) {
  AgentSuite suite;
  suite.facts = get_key<std::vector<std::string>>(j, "facts", "", {});
  const json& cases = require_key(j, "cases", "");
  require(cases.is_array(), ErrorCode::ParseError, "config key 'cases' must be an array");
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const std::string p = "cases[" + std::to_string(i) + "]";
    TaskCase c;
    c.level = get_key<int>(cases[i], "level", p);
    require(c.level >= 1 && c.level <= 3, ErrorCode::ParseError,
            "config key '" + p + ".level' must be 1, 2 or 3");
    c.query = get_key<std::string>(cases[i], "query", p);
    c.state = get_key<json>(cases[i], "state", p, json::object());
    const json& exp = require_key(cases[i], "expect", p);
    const std::string ep = p + ".expect";
    c.expected.contains = get_key<std::vector<std::string>>(exp, "contains", ep, {});
    c.expected.excludes = get_key<std::vector<std::string>>(exp, "excludes", ep, {});
    if (exp.contains("exact")) c.expected.exact = get_key<std::string>(exp, "exact", ep);
    require(c.expected.exact || !c.expected.contains.empty(), ErrorCode::ParseError,
            "config key '" + ep + "' needs 'contains' or 'exact'");
    suite.cases.push_back(std::move(c));
  }
  return suite;
}

/// Fresh agent corpus: tool documentation plus the suite facts.
inline Corpus build_agent_corpus(const ToolRegistry& registry, const std::vector<std::string>& facts) {
  CorpusConfig cfg;
  cfg.dim = kAgentDim;
  Corpus corpus(cfg);
  index_tool_docs(corpus, registry);
  for (const auto& f : facts) corpus.ingest(fact_entry(f), 0);
  return corpus;
}

}  // namespace crag
