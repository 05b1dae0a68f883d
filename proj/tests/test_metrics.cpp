#include <sstream>

#include <gtest/gtest.h>

#include "crag/metrics.hpp"

using namespace crag;

namespace {

RankedResult hit_at(std::size_t rank, std::size_t n = 3) {
  RankedResult r;
  for (EntryId id = 1; id <= n; ++id) r.ranked.push_back(id);
  if (rank > 0) r.relevant = {static_cast<EntryId>(rank)};
  else r.relevant = {99};
  return r;
}

std::vector<MetricWindow> windows(const Vec& ys) {
  std::vector<MetricWindow> w;
  for (std::size_t i = 0; i < ys.size(); ++i) w.push_back({i, ys[i], ys[i], ys[i], 1});
  return w;
}

}  // namespace

TEST(TopkAccuracy, Examples) {
  EXPECT_DOUBLE_EQ(topk_accuracy(std::vector{hit_at(1), hit_at(1)}, 1), 1.0);
  EXPECT_DOUBLE_EQ(topk_accuracy(std::vector{hit_at(0)}, 3), 0.0);
  EXPECT_DOUBLE_EQ(topk_accuracy(std::vector{hit_at(1), hit_at(3), hit_at(0)}, 2), 1.0 / 3.0);
  try {
    topk_accuracy(std::vector<RankedResult>{}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyResults);
  }
}

TEST(Mrr, Examples) {
  EXPECT_DOUBLE_EQ(mrr(std::vector{hit_at(1), hit_at(1)}), 1.0);
  EXPECT_DOUBLE_EQ(mrr(std::vector{hit_at(1), hit_at(2)}), 0.75);
  EXPECT_DOUBLE_EQ(mrr(std::vector{hit_at(0)}), 0.0);
}

TEST(Ndcg, Examples) {
  RankedResult swapped;
  swapped.ranked = {1, 2};
  swapped.gains = {{1, 0.0}, {2, 1.0}};
  EXPECT_NEAR(ndcg(std::vector{swapped}, 2), 0.6309297536, 1e-9);
  RankedResult ideal;
  ideal.ranked = {2, 1};
  ideal.gains = swapped.gains;
  EXPECT_DOUBLE_EQ(ndcg(std::vector{ideal}, 2), 1.0);
  EXPECT_DOUBLE_EQ(ndcg(std::vector{hit_at(1)}, 1), 1.0);
}

TEST(Retention, Examples) {
  EXPECT_DOUBLE_EQ(relevance_retention_rate(windows({0.6, 0.6, 0.6, 0.6}), MetricSelector::Ndcg), 1.0);
  EXPECT_DOUBLE_EQ(relevance_retention_rate(windows({0.8, 0.6, 0.5, 0.4}), MetricSelector::Ndcg), 0.5);
  EXPECT_GT(relevance_retention_rate(windows({0.2, 0.4, 0.6, 0.8}), MetricSelector::Topk), 1.0);
  try {
    relevance_retention_rate(windows({0.0, 0.5}), MetricSelector::Mrr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateBaseline);
  }
}

TEST(Degradation, ExactLines) {
  Vec down;
  Vec up;
  for (int t = 0; t < 10; ++t) {
    down.push_back(1.0 - 0.1 * t);
    up.push_back(0.5 + 0.05 * t);
  }
  EXPECT_NEAR(retrieval_degradation_rate(windows(down), MetricSelector::Ndcg), 0.1, 1e-9);
  EXPECT_NEAR(retrieval_degradation_rate(windows(up), MetricSelector::Ndcg), -0.05, 1e-9);
  EXPECT_DOUBLE_EQ(retrieval_degradation_rate(windows({0.3, 0.3, 0.3}), MetricSelector::Ndcg), 0.0);
  EXPECT_THROW(retrieval_degradation_rate(windows({0.3}), MetricSelector::Ndcg), Error);
}

TEST(Stability, Examples) {
  EXPECT_DOUBLE_EQ(temporal_stability(windows({0.7, 0.7, 0.7}), MetricSelector::Ndcg), 1.0);
  EXPECT_DOUBLE_EQ(temporal_stability(windows({0.5, 1.5}), MetricSelector::Ndcg), 0.5);
  EXPECT_DOUBLE_EQ(temporal_stability(windows({0.01, 5.0, 0.01, 0.01}), MetricSelector::Ndcg), 0.0);
}

TEST(MetricsCsv, HeaderAndRows) {
  std::ostringstream out;
  write_metrics_csv(out, std::vector<MetricWindow>{{0, 1.0, 0.5, 0.25, 4}});
  EXPECT_EQ(out.str(), "window,topk,mrr,ndcg\n0,1,0.5,0.25\n");
  EXPECT_EQ(metric_selector_from_string("mrr"), MetricSelector::Mrr);
  EXPECT_THROW(metric_selector_from_string("map"), Error);
}
