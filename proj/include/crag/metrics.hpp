#pragma once

// Ranking metrics and drift-aware summaries over metric windows.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "crag/core.hpp"

namespace crag {

struct RankedResult {
  std::string query_id;
  std::vector<EntryId> ranked;
  std::set<EntryId> relevant;
  std::map<EntryId, double> gains;  // graded relevance; missing ids in `relevant` count 1

  double gain(EntryId id) const {
    if (auto it = gains.find(id); it != gains.end()) return it->second;
    return relevant.contains(id) ? 1.0 : 0.0;
  }
};

struct MetricWindow {
  std::size_t index = 0;
  double topk = 0.0;
  double mrr = 0.0;
  double ndcg = 0.0;
  std::size_t n_queries = 0;

  bool operator==(const MetricWindow&) const = default;
};

enum class MetricSelector { Topk, Mrr, Ndcg };

inline double select(const MetricWindow& w, MetricSelector s) {
  switch (s) {
    case MetricSelector::Topk: return w.topk;
    case MetricSelector::Mrr: return w.mrr;
    case MetricSelector::Ndcg: return w.ndcg;
  }
  return w.ndcg;
}

inline MetricSelector metric_selector_from_string(std::string_view s) {
  if (s == "topk") return MetricSelector::Topk;
  if (s == "mrr") return MetricSelector::Mrr;
  if (s == "ndcg") return MetricSelector::Ndcg;
  throw Error(ErrorCode::InvalidArgument, "unknown metric '" + std::string(s) + "'");
}

inline void require_results(std::span<const RankedResult> results) {
  require(!results.empty(), ErrorCode::EmptyResults, "metrics: no results");
}

inline double topk_accuracy(std::span<const RankedResult> results, std::size_t k) {
  require(k >= 1, ErrorCode::InvalidArgument, "topk_accuracy: k must be >= 1");
  require_results(results);
  double hits = 0.0;
  for (const RankedResult& r : results) {
    const std::size_t n = std::min(k, r.ranked.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (r.relevant.contains(r.ranked[i])) {
        hits += 1.0;
        break;
      }
    }
  }
  return hits / static_cast<double>(results.size());
}

inline double mrr(std::span<const RankedResult> results) {
  require_results(results);
  double total = 0.0;
  for (const RankedResult& r : results) {
    for (std::size_t i = 0; i < r.ranked.size(); ++i) {
      if (r.relevant.contains(r.ranked[i])) {
        total += 1.0 / static_cast<double>(i + 1);
        break;
      }
    }
  }
  return total / static_cast<double>(results.size());
}

inline double ndcg(std::span<const RankedResult> results, std::size_t k) {
  require(k >= 1, ErrorCode::InvalidArgument, "ndcg: k must be >= 1");
  require_results(results);
  double total = 0.0;
  for (const RankedResult& r : results) {
    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, r.ranked.size()); ++i) {
      dcg += r.gain(r.ranked[i]) / std::log2(static_cast<double>(i + 2));
    }
    std::vector<double> ideal;
    for (const auto& [id, g] : r.gains) ideal.push_back(g);
    for (EntryId id : r.relevant) {
      if (!r.gains.contains(id)) ideal.push_back(1.0);
    }
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i) {
      idcg += ideal[i] / std::log2(static_cast<double>(i + 2));
    }
    total += idcg > 0.0 ? dcg / idcg : 1.0;
  }
  return total / static_cast<double>(results.size());
}

inline MetricWindow evaluate_window(std::span<const RankedResult> results, std::size_t k,
                                    std::size_t index) {
  return {index, topk_accuracy(results, k), mrr(results), ndcg(results, k), results.size()};
}

namespace metrics_detail {

inline std::vector<double> series(std::span<const MetricWindow> windows, MetricSelector s) {
  require(windows.size() >= 2, ErrorCode::InvalidArgument, "metrics: need at least 2 windows");
  std::vector<double> out;
  for (const auto& w : windows) out.push_back(select(w, s));
  return out;
}

inline double mean(std::span<const double> xs) {
  double total = 0.0;
  for (double x : xs) total += x;
  return total / static_cast<double>(xs.size());
}

}  // namespace metrics_detail

inline double relevance_retention_rate(std::span<const MetricWindow> windows,
                                       MetricSelector s = MetricSelector::Ndcg) {
  const auto xs = metrics_detail::series(windows, s);
  const std::size_t q = (xs.size() + 3) / 4;
  const double first = metrics_detail::mean(std::span(xs).first(q));
  const double last = metrics_detail::mean(std::span(xs).last(q));
  require(first != 0.0, ErrorCode::DegenerateBaseline, "retention: baseline mean is 0");
  return std::max(0.0, last / first);
}

inline double retrieval_degradation_rate(std::span<const MetricWindow> windows,
                                         MetricSelector s = MetricSelector::Ndcg) {
  const auto ys = metrics_detail::series(windows, s);
  const double n = static_cast<double>(ys.size());
  const double tbar = (n - 1.0) / 2.0;
  const double ybar = metrics_detail::mean(ys);
  double sty = 0.0;
  double stt = 0.0;
  for (std::size_t t = 0; t < ys.size(); ++t) {
    const double dt = static_cast<double>(t) - tbar;
    sty += dt * (ys[t] - ybar);
    stt += dt * dt;
  }
  return -sty / stt;
}

inline double temporal_stability(std::span<const MetricWindow> windows,
                                 MetricSelector s = MetricSelector::Ndcg) {
  const auto xs = metrics_detail::series(windows, s);
  const double m = metrics_detail::mean(xs);
  require(m > 0.0, ErrorCode::DegenerateBaseline, "stability: mean is 0");
  double var = 0.0;
  for (double x : xs) var += (x - m) * (x - m);
  var /= static_cast<double>(xs.size());
  return std::max(0.0, 1.0 - std::sqrt(var) / m);
}

inline void write_metrics_csv(std::ostream& out, std::span<const MetricWindow> windows) {
  out << "window,topk,mrr,ndcg\n";
  char buf[128];
  for (const auto& w : windows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", w.index, w.topk, w.mrr, w.ndcg);
    out << buf;
  }
}

}  // namespace crag
