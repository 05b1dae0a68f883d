#pragma once

// Task-aware scoring, exact top-K retrieval, its softmax relaxation, and the
// per-task profile memory.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crag/core.hpp"
#include "crag/corpus.hpp"
#include "crag/tensor.hpp"

namespace crag {

struct TaskDescriptor {
  std::string task_id;
  /// Retrieval subspace. Empty means the whole corpus.
  std::string domain;
  /// Emphasis on related tasks, used when the entry has no score for task_id.
  std::map<std::string, double> weights;

  bool operator==(const TaskDescriptor&) const = default;
};

struct Query {
  std::string text;
  Vec embedding;
  TaskDescriptor task;
  Tick tick = 0;
};

struct RetrieverParams {
  double alpha = 1.0;
  Matrix<double> projection;
  double temperature = 1.0;

  static RetrieverParams identity(std::size_t dim, double alpha = 1.0, double temperature = 1.0) {
    return {alpha, Matrix<double>::identity(dim), temperature};
  }

  void validate() const {
    require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::InvariantViolation, "alpha must be in [0,1]");
    require(temperature > 0.0, ErrorCode::InvariantViolation, "temperature must be > 0");
    require(projection.rows == projection.cols, ErrorCode::InvariantViolation,
            "projection must be square");
    require(all_finite(projection.data), ErrorCode::InvariantViolation,
            "projection entries must be finite");
  }

  bool operator==(const RetrieverParams&) const = default;
};

struct RetrievalOptions {
  /// Drop entries whose uncertainty exceeds this. Off by default.
  std::optional<double> max_uncertainty;
};

struct RetrievedItem {
  EntryId id = 0;
  double score = 0.0;
  double weight = 0.0;
};

struct RetrievedSet {
  std::vector<RetrievedItem> items;  // descending score
  std::size_t k = 0;

  bool contains(EntryId id) const {
    return std::any_of(items.begin(), items.end(), [&](const auto& it) { return it.id == id; });
  }
  std::vector<EntryId> ids() const {
    std::vector<EntryId> out;
    for (const auto& it : items) out.push_back(it.id);
    return out;
  }
};

/// Stored task relevance: the entry's score for the task, else the best
/// emphasis-weighted score over related tasks, else 0.
inline double task_relevance(const KnowledgeEntry& entry, const TaskDescriptor& task) {
  if (auto it = entry.relevance.find(task.task_id); it != entry.relevance.end()) {
    return it->second;
  }
  double best = 0.0;
  for (const auto& [other, emphasis] : task.weights) {
    if (auto it = entry.relevance.find(other); it != entry.relevance.end()) {
      best = std::max(best, emphasis * it->second);
    }
  }
  return best;
}

/// alpha * cos(P q, e) + (1 - alpha) * rel * freshness, generic in the scalar
/// so the retriever parameters can carry derivatives.
template <typename S>
S blended_score(const Vec& query_embedding, const Vec& entry_embedding, const S& alpha,
                const Matrix<S>& projection, double rel_times_freshness) {
  require(query_embedding.size() == projection.cols &&
              entry_embedding.size() == projection.rows,
          ErrorCode::DimensionMismatch, "score: embedding/projection dimension mismatch");
  std::vector<S> pq = matvec(projection, query_embedding);
  S num(0.0);
  S sq(0.0);
  double entry_sq = 0.0;
  for (std::size_t i = 0; i < pq.size(); ++i) {
    num = num + pq[i] * S(entry_embedding[i]);
    sq = sq + pq[i] * pq[i];
    entry_sq += entry_embedding[i] * entry_embedding[i];
  }
  S cos(0.0);
  if (value_of(sq) > 0.0 && entry_sq > 0.0) {
    using std::sqrt;
    cos = num / (sqrt(sq) * S(std::sqrt(entry_sq)));
  }
  return alpha * cos + (S(1.0) - alpha) * S(rel_times_freshness);
}

inline double score(const Query& query, const KnowledgeEntry& entry, const RetrieverParams& params,
                    double freshness) {
  return blended_score<double>(query.embedding, entry.embedding, params.alpha, params.projection,
                               task_relevance(entry, query.task) * freshness);
}

inline double score(const Query& query, const KnowledgeEntry& entry, const RetrieverParams& params,
                    const Corpus& corpus) {
  return score(query, entry, params, corpus.freshness(entry, std::max(query.tick, entry.created_at)));
}

namespace detail {

inline bool in_subspace(const KnowledgeEntry& e, const Query& q, const RetrievalOptions& opts) {
  if (opts.max_uncertainty && e.uncertainty > *opts.max_uncertainty) return false;
  return q.task.domain.empty() || e.domain == q.task.domain;
}

}  // namespace detail

/// Exact scan. Hard selection carries uniform weights.
inline RetrievedSet retrieve_topk(const Query& query, std::size_t k, const Corpus& corpus,
                                  const RetrieverParams& params,
                                  const RetrievalOptions& opts = {}) {
  require(k >= 1, ErrorCode::InvalidArgument, "retrieve_topk: k must be >= 1");
  RetrievedSet out;
  out.k = k;
  bool any_in_domain = false;
  corpus.for_each([&](const KnowledgeEntry& e) {
    if (!any_in_domain && detail::in_subspace(e, query, opts)) any_in_domain = true;
  });
  Query scoped = query;
  if (!any_in_domain) scoped.task.domain.clear();

  std::vector<RetrievedItem> scored;
  corpus.for_each([&](const KnowledgeEntry& e) {
    if (!detail::in_subspace(e, scoped, opts)) return;
    scored.push_back({e.id, score(query, e, params, corpus), 0.0});
  });
  auto better = [](const RetrievedItem& a, const RetrievedItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  };
  const std::size_t n = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                    better);
  scored.resize(n);
  for (auto& item : scored) item.weight = 1.0 / static_cast<double>(n);
  out.items = std::move(scored);
  return out;
}

/// Same selection as retrieve_topk, weighted by softmax(score / temperature).
inline RetrievedSet soft_retrieve(const Query& query, std::size_t k, const Corpus& corpus,
                                  const RetrieverParams& params,
                                  const RetrievalOptions& opts = {}) {
  require(params.temperature > 0.0, ErrorCode::InvalidArgument,
          "soft_retrieve: temperature must be > 0");
  RetrievedSet out = retrieve_topk(query, k, corpus, params, opts);
  Vec scores;
  for (const auto& item : out.items) scores.push_back(item.score);
  Vec w = softmax(scores, params.temperature);
  for (std::size_t i = 0; i < w.size(); ++i) out.items[i].weight = w[i];
  return out;
}

// ---------------------------------------------------------------------------

struct TaskRecord {
  Tick tick = 0;
  double mean_score = 0.0;
  double downstream_loss = 0.0;
};

class TaskProfileMemory {
 public:
  /// Appends a record and refreshes the analogy map. `query_embedding` is the
  /// mean query embedding observed for the task at this tick.
  void update(const TaskDescriptor& task, Tick tick, double mean_score, double downstream_loss,
              const Vec& query_embedding) {
    auto& profile = profiles_[task.task_id];
    require(profile.history.empty() || tick > profile.history.back().tick,
            ErrorCode::OutOfOrderTick,
            "task " + task.task_id + ": tick " + std::to_string(tick) + " not after last record");
    if (profile.embedding_sum.empty()) profile.embedding_sum.assign(query_embedding.size(), 0.0);
    require(profile.embedding_sum.size() == query_embedding.size(),
            ErrorCode::DimensionMismatch, "task memory: embedding dimension changed");
    for (std::size_t i = 0; i < query_embedding.size(); ++i) {
      profile.embedding_sum[i] += query_embedding[i];
    }
    ++profile.count;
    profile.history.push_back({tick, mean_score, downstream_loss});
    recompute_analogies();
  }

  const std::vector<TaskRecord>& history(const std::string& task_id) const {
    static const std::vector<TaskRecord> kEmpty;
    auto it = profiles_.find(task_id);
    return it == profiles_.end() ? kEmpty : it->second.history;
  }

  std::optional<std::string> analogy(const std::string& task_id) const {
    auto it = analogies_.find(task_id);
    if (it == analogies_.end()) return std::nullopt;
    return it->second;
  }

  /// Nearest recorded task to an embedding by cosine of per-task mean query
  /// embeddings; ties go to the lexicographically smallest task id.
  std::optional<std::string> nearest_task(const Vec& embedding,
                                          const std::string& exclude = {}) const {
    std::optional<std::string> best;
    double best_cos = -2.0;
    for (const auto& [id, profile] : profiles_) {
      if (id == exclude || profile.count == 0) continue;
      const double c = cosine(embedding, profile.embedding_sum);
      if (c > best_cos) {
        best_cos = c;
        best = id;
      }
    }
    return best;
  }

  std::size_t task_count() const { return profiles_.size(); }

 private:
  struct Profile {
    std::vector<TaskRecord> history;
    Vec embedding_sum;
    std::size_t count = 0;
  };

  void recompute_analogies() {
    analogies_.clear();
    for (const auto& [id, profile] : profiles_) {
      if (auto other = nearest_task(profile.embedding_sum, id)) analogies_[id] = *other;
    }
  }

  std::map<std::string, Profile> profiles_;
  std::map<std::string, std::string> analogies_;
};

/// Functional form of TaskProfileMemory::update.
inline TaskProfileMemory update_task_memory(TaskProfileMemory memory, const TaskDescriptor& task,
                                            Tick tick, double mean_score, double downstream_loss,
                                            const Vec& query_embedding) {
  memory.update(task, tick, mean_score, downstream_loss, query_embedding);
  return memory;
}

}  // namespace crag
