#include <cmath>

#include <gtest/gtest.h>

#include "crag/dro.hpp"

using namespace crag;

namespace {

/// Best feasible point of a temperature grid for the worst-case sense.
Vec grid_oracle(const Vec& losses, double epsilon) {
  Vec best;
  double best_obj = -1e300;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double temp = 0.5 + 4.5 * i / (n - 1);
    const Vec w = tilted_weights(losses, 1.0 / temp);
    if (kl_to_uniform(w) > epsilon) continue;
    double obj = 0.0;
    for (std::size_t m = 0; m < w.size(); ++m) obj += w[m] * losses[m];
    if (obj > best_obj) {
      best_obj = obj;
      best = w;
    }
  }
  return best;
}

}  // namespace

TEST(Dro, MatchesTemperatureGrid) {
  const Vec losses{1, 2, 3};
  const DomainWeights w = solve_dro_weights(losses, 0.1, DroSense::WorstCase);
  const Vec oracle = grid_oracle(losses, 0.1);
  ASSERT_EQ(oracle.size(), 3u);
  for (std::size_t m = 0; m < 3; ++m) EXPECT_NEAR(w.w[m], oracle[m], 1e-4);
  EXPECT_NEAR(kl_to_uniform(w.w), 0.1, 1e-9);
}

TEST(Dro, EqualLossesGiveUniform) {
  for (DroSense s : {DroSense::WorstCase, DroSense::BestCase}) {
    for (double eps : {0.0, 0.1, 10.0}) {
      const DomainWeights w = solve_dro_weights(Vec{2, 2, 2, 2}, eps, s);
      for (double v : w.w) EXPECT_NEAR(v, 0.25, 1e-8);
    }
  }
}

TEST(Dro, ZeroEpsilonIsExactlyUniform) {
  const DomainWeights w = solve_dro_weights(Vec{1, 2, 3}, 0.0, DroSense::WorstCase);
  for (double v : w.w) EXPECT_EQ(v, 1.0 / 3.0);
}

TEST(Dro, LargeEpsilonReachesVertex) {
  const DomainWeights w = solve_dro_weights(Vec{1, 2}, 100.0, DroSense::WorstCase);
  EXPECT_EQ(w.w, (Vec{0, 1}));
  const DomainWeights lit = solve_dro_weights(Vec{1, 2}, 100.0, DroSense::BestCase);
  EXPECT_EQ(lit.w, (Vec{1, 0}));
}

TEST(Dro, SensesMirrorEachOther) {
  const Vec losses{0.5, 1.5, 1.0};
  const auto up = solve_dro_weights(losses, 0.05, DroSense::WorstCase);
  const auto down = solve_dro_weights(losses, 0.05, DroSense::BestCase);
  EXPECT_GT(up.w[1], 1.0 / 3.0);
  EXPECT_GT(down.w[0], 1.0 / 3.0);
  EXPECT_NEAR(up.w[1], down.w[0], 1e-9);
}

TEST(Dro, Errors) {
  EXPECT_THROW(solve_dro_weights(Vec{}, 0.1, DroSense::WorstCase), Error);
  EXPECT_THROW(solve_dro_weights(Vec{1, 2}, -0.1, DroSense::WorstCase), Error);
  EXPECT_THROW(solve_dro_weights(Vec{1, NAN}, 0.1, DroSense::WorstCase), Error);
  EXPECT_THROW(solve_dro_weights(Vec{1, 2}, Vec{0.5}, 0.1, DroSense::WorstCase), Error);
  EXPECT_THROW(dro_sense_from_string("average_case"), Error);
}
