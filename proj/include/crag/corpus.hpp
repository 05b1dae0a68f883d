#pragma once

// Evolving knowledge base: validated incremental ingest with redundancy
// merging, half-life freshness, capacity eviction, pruning, and snapshots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crag/core.hpp"
#include "crag/tensor.hpp"

namespace crag {

struct KnowledgeEntry {
  EntryId id = 0;
  Vec embedding;
  std::string text;
  std::string domain;
  std::map<std::string, double> relevance;
  Tick created_at = 0;
  Tick last_validated = 0;
  double uncertainty = 0.0;
  std::string source;

  double max_relevance() const {
    double best = 0.0;
    for (const auto& [task, score] : relevance) best = std::max(best, score);
    return best;
  }

  bool operator==(const KnowledgeEntry&) const = default;
};

struct CorpusConfig {
  std::size_t dim = 64;
  double half_life = 10.0;
  double redundancy_threshold = 0.95;
  double relevance_floor = 0.1;
  std::size_t capacity = 1024;

  void validate() const {
    require(dim >= 1, ErrorCode::InvariantViolation, "corpus dim must be >= 1");
    require(half_life > 0.0, ErrorCode::InvariantViolation, "half_life must be > 0");
    require(redundancy_threshold > 0.0 && redundancy_threshold <= 1.0,
            ErrorCode::InvariantViolation, "redundancy_threshold must be in (0, 1]");
    require(relevance_floor >= 0.0 && relevance_floor <= 1.0, ErrorCode::InvariantViolation,
            "relevance_floor must be in [0, 1]");
    require(capacity >= 1, ErrorCode::InvariantViolation, "capacity must be >= 1");
  }

  bool operator==(const CorpusConfig&) const = default;
};

struct CorpusSnapshot {
  CorpusConfig config;
  std::vector<KnowledgeEntry> entries;  // ascending by id
  Tick tick = 0;

  bool operator==(const CorpusSnapshot&) const = default;
};

enum class ValidationFailure {
  EmptyPayload,
  NotUnitNorm,
  NonFiniteEmbedding,
  DimensionMismatch,
  ScoreOutOfRange,
  TimestampOrder,
};

inline std::string_view to_string(ValidationFailure f) {
  switch (f) {
    case ValidationFailure::EmptyPayload: return "EmptyPayload";
    case ValidationFailure::NotUnitNorm: return "NotUnitNorm";
    case ValidationFailure::NonFiniteEmbedding: return "NonFiniteEmbedding";
    case ValidationFailure::DimensionMismatch: return "DimensionMismatch";
    case ValidationFailure::ScoreOutOfRange: return "ScoreOutOfRange";
    case ValidationFailure::TimestampOrder: return "TimestampOrder";
  }
  return "Unknown";
}

inline constexpr double kUnitNormTolerance = 1e-6;

/// Rule-based quality filter. Returns nullopt on pass.
inline std::optional<ValidationFailure> validate(const KnowledgeEntry& entry,
                                                 std::optional<std::size_t> dim = std::nullopt) {
  if (entry.text.empty()) return ValidationFailure::EmptyPayload;
  if (dim && entry.embedding.size() != *dim) return ValidationFailure::DimensionMismatch;
  if (!all_finite(entry.embedding)) return ValidationFailure::NonFiniteEmbedding;
  if (std::abs(norm2(entry.embedding) - 1.0) > kUnitNormTolerance) {
    return ValidationFailure::NotUnitNorm;
  }
  if (!(entry.uncertainty >= 0.0 && entry.uncertainty <= 1.0)) {
    return ValidationFailure::ScoreOutOfRange;
  }
  for (const auto& [task, score] : entry.relevance) {
    if (!(score >= 0.0 && score <= 1.0)) return ValidationFailure::ScoreOutOfRange;
  }
  if (entry.created_at > entry.last_validated) return ValidationFailure::TimestampOrder;
  return std::nullopt;
}

enum class IngestStatus { Accepted, Merged, Rejected };

enum class RejectReason { ValidationFailed, DuplicateId };

struct IngestResult {
  IngestStatus status = IngestStatus::Rejected;
  /// Inserted id for Accepted, merge target for Merged, offered id for Rejected.
  EntryId id = 0;
  std::optional<RejectReason> reason;
  std::optional<ValidationFailure> validation;
  /// Entry evicted to make room, if any.
  std::optional<EntryId> evicted;
};

/// 2^(-(now - last_validated) / half_life). Ages below zero clamp to 1.
inline double freshness_weight(const KnowledgeEntry& entry, Tick now, double half_life) {
  require(now >= entry.created_at, ErrorCode::InvalidArgument,
          "freshness_weight: now precedes created_at");
  const double age = std::max<double>(0.0, static_cast<double>(now - entry.last_validated));
  return std::exp2(-age / half_life);
}

/// Thread-safe evolving corpus. Readers share, writers serialize.
class Corpus {
 public:
  /// Extra pruning signal; returning true marks an entry for removal.
  using PruneHook = std::function<bool(const KnowledgeEntry&, Tick)>;

  explicit Corpus(CorpusConfig config = {}) : config_(config) { config_.validate(); }

  Corpus(const Corpus& other) {
    std::shared_lock lock(other.mutex_);
    config_ = other.config_;
    entries_ = other.entries_;
    tick_ = other.tick_;
  }

  Corpus& operator=(const Corpus& other) {
    if (this == &other) return *this;
    std::unique_lock lock(mutex_, std::defer_lock);
    std::shared_lock other_lock(other.mutex_, std::defer_lock);
    std::lock(lock, other_lock);
    config_ = other.config_;
    entries_ = other.entries_;
    tick_ = other.tick_;
    return *this;
  }

  const CorpusConfig& config() const { return config_; }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  bool contains(EntryId id) const {
    std::shared_lock lock(mutex_);
    return entries_.count(id) > 0;
  }

  std::optional<KnowledgeEntry> find(EntryId id) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(id);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<EntryId> ids() const {
    std::shared_lock lock(mutex_);
    std::vector<EntryId> out;
    out.reserve(entries_.size());
    for (const auto& [id, e] : entries_) out.push_back(id);
    return out;
  }

  /// Visits entries in ascending id order under a shared lock.
  template <typename F>
  void for_each(F&& visit) const {
    std::shared_lock lock(mutex_);
    for (const auto& [id, e] : entries_) visit(e);
  }

  double freshness(const KnowledgeEntry& entry, Tick now) const {
    return freshness_weight(entry, now, config_.half_life);
  }

  IngestResult ingest(const KnowledgeEntry& entry, Tick now) {
    std::unique_lock lock(mutex_);
    IngestResult result;
    result.id = entry.id;
    if (auto failure = validate(entry, config_.dim)) {
      result.reason = RejectReason::ValidationFailed;
      result.validation = failure;
      return result;
    }
    tick_ = std::max(tick_, now);

    const KnowledgeEntry* nearest = nullptr;
    double best = -2.0;
    for (const auto& [id, existing] : entries_) {
      const double sim = dot(existing.embedding, entry.embedding);
      if (sim > best) {  // strict: ties keep the lowest id
        best = sim;
        nearest = &existing;
      }
    }
    if (nearest != nullptr && best >= config_.redundancy_threshold) {
      KnowledgeEntry& target = entries_.at(nearest->id);
      for (const auto& [task, score] : entry.relevance) {
        auto [it, inserted] = target.relevance.try_emplace(task, score);
        if (!inserted) it->second = std::max(it->second, score);
      }
      target.last_validated = std::max(target.last_validated, now);
      result.status = IngestStatus::Merged;
      result.id = target.id;
      return result;
    }
    if (entries_.count(entry.id) > 0) {
      result.reason = RejectReason::DuplicateId;
      return result;
    }
    if (entries_.size() >= config_.capacity) {
      result.evicted = stalest(now);
      entries_.erase(*result.evicted);
    }
    entries_.emplace(entry.id, entry);
    result.status = IngestStatus::Accepted;
    return result;
  }

  /// Removes entries that are both stale and low-relevance. Returns ascending ids.
  std::vector<EntryId> prune(Tick now, const PruneHook& hook = {}) {
    std::unique_lock lock(mutex_);
    tick_ = std::max(tick_, now);
    std::vector<EntryId> removed;
    for (const auto& [id, e] : entries_) {
      const bool stale = freshness_weight(e, std::max(now, e.created_at), config_.half_life) <
                         config_.relevance_floor;
      const bool low = e.max_relevance() < config_.relevance_floor;
      if ((stale && low) || (hook && hook(e, now))) removed.push_back(id);
    }
    for (EntryId id : removed) entries_.erase(id);
    return removed;
  }

  bool remove(EntryId id) {
    std::unique_lock lock(mutex_);
    return entries_.erase(id) > 0;
  }

  void clear() {
    std::unique_lock lock(mutex_);
    entries_.clear();
  }

  Tick tick() const {
    std::shared_lock lock(mutex_);
    return tick_;
  }

  CorpusSnapshot snapshot() const {
    std::shared_lock lock(mutex_);
    CorpusSnapshot snap{config_, {}, tick_};
    snap.entries.reserve(entries_.size());
    for (const auto& [id, e] : entries_) snap.entries.push_back(e);
    return snap;
  }

  static Corpus load(const CorpusSnapshot& snap) {
    snap.config.validate();
    require(snap.entries.size() <= snap.config.capacity, ErrorCode::InvariantViolation,
            "snapshot holds more entries than capacity");
    Corpus corpus(snap.config);
    corpus.tick_ = snap.tick;
    for (std::size_t i = 0; i < snap.entries.size(); ++i) {
      const KnowledgeEntry& e = snap.entries[i];
      if (auto failure = validate(e, snap.config.dim)) {
        throw Error(ErrorCode::InvariantViolation, "entry " + std::to_string(e.id) + " fails " +
                                                       std::string(to_string(*failure)));
      }
      require(corpus.entries_.count(e.id) == 0, ErrorCode::DuplicateId,
              "duplicate id " + std::to_string(e.id));
      require(i == 0 || snap.entries[i - 1].id < e.id, ErrorCode::InvariantViolation,
              "snapshot entries must be sorted ascending by id");
      corpus.entries_.emplace(e.id, e);
    }
    return corpus;
  }

 private:
  // Caller holds the unique lock.
  EntryId stalest(Tick now) const {
    EntryId victim = entries_.begin()->first;
    double lowest = 2.0;
    for (const auto& [id, e] : entries_) {
      const double w = freshness_weight(e, std::max(now, e.created_at), config_.half_life);
      if (w < lowest) {
        lowest = w;
        victim = id;
      }
    }
    return victim;
  }

  CorpusConfig config_;
  std::map<EntryId, KnowledgeEntry> entries_;
  Tick tick_ = 0;
  mutable std::shared_mutex mutex_;
};

// ---------------------------------------------------------------------------
// Snapshot file format "crag-corpus/1": one JSON object per line. The first
// line is the header (format, tick, config); every following line is one entry.

inline constexpr const char* kCorpusFormat = "crag-corpus/1";

/// Rounds to 9 significant decimal digits.
inline double round_sig9(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return std::strtod(buf, nullptr);
}

inline nlohmann::json to_json(const CorpusConfig& c) {
  return {{"dim", c.dim},
          {"half_life", c.half_life},
          {"redundancy_threshold", c.redundancy_threshold},
          {"relevance_floor", c.relevance_floor},
          {"capacity", c.capacity}};
}

inline CorpusConfig corpus_config_from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.dim = j.at("dim").get<std::size_t>();
  c.half_life = j.at("half_life").get<double>();
  c.redundancy_threshold = j.at("redundancy_threshold").get<double>();
  c.relevance_floor = j.at("relevance_floor").get<double>();
  c.capacity = j.at("capacity").get<std::size_t>();
  return c;
}

inline void write_snapshot(std::ostream& out, const CorpusSnapshot& snap) {
  nlohmann::json header = {
      {"format", kCorpusFormat}, {"tick", snap.tick}, {"config", to_json(snap.config)}};
  out << header.dump() << '\n';
  for (const KnowledgeEntry& e : snap.entries) {
    nlohmann::json emb = nlohmann::json::array();
    for (double x : e.embedding) emb.push_back(round_sig9(x));
    nlohmann::json rec = {{"id", e.id},
                          {"embedding", emb},
                          {"text", e.text},
                          {"domain", e.domain},
                          {"relevance", e.relevance},
                          {"created_at", e.created_at},
                          {"last_validated", e.last_validated},
                          {"uncertainty", e.uncertainty},
                          {"source", e.source}};
    out << rec.dump() << '\n';
  }
}

inline CorpusSnapshot read_snapshot(std::istream& in) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::ParseError,
          "corpus snapshot: missing header");
  CorpusSnapshot snap;
  try {
    auto header = nlohmann::json::parse(line);
    require(header.at("format").get<std::string>() == kCorpusFormat, ErrorCode::ParseError,
            "corpus snapshot: unsupported format");
    snap.tick = header.at("tick").get<Tick>();
    snap.config = corpus_config_from_json(header.at("config"));
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto rec = nlohmann::json::parse(line);
      KnowledgeEntry e;
      e.id = rec.at("id").get<EntryId>();
      e.embedding = rec.at("embedding").get<Vec>();
      e.text = rec.at("text").get<std::string>();
      e.domain = rec.at("domain").get<std::string>();
      e.relevance = rec.at("relevance").get<std::map<std::string, double>>();
      e.created_at = rec.at("created_at").get<Tick>();
      e.last_validated = rec.at("last_validated").get<Tick>();
      e.uncertainty = rec.at("uncertainty").get<double>();
      e.source = rec.at("source").get<std::string>();
      snap.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::ParseError, std::string("corpus snapshot: ") + ex.what());
  }
  return snap;
}

}  // namespace crag
