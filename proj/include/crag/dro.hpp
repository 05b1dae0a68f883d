#pragma once

// Domain weights on the simplex inside a KL ball around uniform.
//
// The linear objective sum_m w_m * loss_m over {w in simplex, KL(w || u) <= eps}
// is optimized by the exponential family w_m ∝ exp(±beta * loss_m); KL is
// increasing in beta, so beta is found by bisection.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "crag/core.hpp"

namespace crag {

enum class DroSense {
  /// Maximize the weighted loss (robust to the worst domain mixture).
  WorstCase,
  /// Minimize it (down-weights high-loss domains).
  BestCase,
};

inline std::string_view to_string(DroSense s) {
  return s == DroSense::WorstCase ? "worst_case" : "best_case";
}

inline DroSense dro_sense_from_string(std::string_view s) {
  if (s == "worst_case") return DroSense::WorstCase;
  if (s == "best_case") return DroSense::BestCase;
  throw Error(ErrorCode::InvalidArgument, "unknown DRO sense '" + std::string(s) + "'");
}

struct DomainWeights {
  Vec w;
  double epsilon = 0.1;
  DroSense sense = DroSense::WorstCase;

  static DomainWeights uniform(std::size_t m, double epsilon = 0.1,
                               DroSense sense = DroSense::WorstCase) {
    return {Vec(m, 1.0 / static_cast<double>(m)), epsilon, sense};
  }

  bool operator==(const DomainWeights&) const = default;
};

/// Divergence bound on the stream relative to the nominal mixture. Only used
/// for reporting; the optimization uses the domain-weight ball.
struct UncertaintySet {
  double rho = 0.5;
  std::string reference = "nominal";
};

/// KL(w || uniform) = sum_m w_m log(M w_m).
inline double kl_to_uniform(std::span<const double> w) {
  const double m = static_cast<double>(w.size());
  double kl = 0.0;
  for (double x : w) {
    if (x > 0.0) kl += x * std::log(m * x);
  }
  return kl;
}

/// softmax(beta * z).
inline Vec tilted_weights(std::span<const double> z, double beta) {
  const double top = *std::max_element(z.begin(), z.end());
  Vec w(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    w[i] = std::exp(beta * (z[i] - top));
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

inline DomainWeights solve_dro_weights(std::span<const double> losses, std::span<const double> w0,
                                       double epsilon, DroSense sense) {
  const std::size_t m = losses.size();
  require(m >= 1, ErrorCode::InvalidArgument, "solve_dro_weights: need at least one domain");
  require(w0.empty() || w0.size() == m, ErrorCode::DimensionMismatch,
          "solve_dro_weights: w0 length");
  require(epsilon >= 0.0, ErrorCode::InvalidArgument, "solve_dro_weights: epsilon must be >= 0");
  for (double l : losses) {
    require(std::isfinite(l), ErrorCode::InvalidArgument, "solve_dro_weights: non-finite loss");
  }
  DomainWeights out = DomainWeights::uniform(m, epsilon, sense);

  Vec z(losses.begin(), losses.end());
  if (sense == DroSense::BestCase) {
    for (double& v : z) v = -v;
  }
  const double top = *std::max_element(z.begin(), z.end());
  const auto ties = static_cast<double>(std::count(z.begin(), z.end(), top));
  if (ties == static_cast<double>(m) || epsilon == 0.0) return out;

  // Vertex limit beta -> inf: uniform over the maximizers.
  const double kl_max = std::log(static_cast<double>(m) / ties);
  if (epsilon >= kl_max) {
    for (std::size_t i = 0; i < m; ++i) out.w[i] = z[i] == top ? 1.0 / ties : 0.0;
    return out;
  }

  double lo = 0.0;
  double hi = 1.0;
  while (kl_to_uniform(tilted_weights(z, hi)) <= epsilon) {
    lo = hi;
    hi *= 2.0;
  }
  for (int iter = 0; iter < 200 && hi - lo > 0.0; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (kl_to_uniform(tilted_weights(z, mid)) <= epsilon) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  out.w = tilted_weights(z, lo);
  return out;
}

inline DomainWeights solve_dro_weights(std::span<const double> losses, double epsilon,
                                       DroSense sense) {
  return solve_dro_weights(losses, {}, epsilon, sense);
}

}  // namespace crag
