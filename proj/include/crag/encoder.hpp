#pragma once

// Deterministic token feature-hashing encoder.

#include <cctype>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "crag/core.hpp"

namespace crag {

/// Lowercased alphanumeric runs.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

/// Hashes each token into one of `dim` buckets with a +-1 sign, then
/// L2-normalizes. Text without tokens maps to the first basis vector.
inline Vec encode(std::string_view text, std::size_t dim) {
  require(dim >= 8, ErrorCode::InvalidArgument, "encode: dim must be >= 8");
  Vec v(dim, 0.0);
  for (const std::string& token : tokenize(text)) {
    const std::uint64_t h = fnv1a(token);
    const std::size_t bucket = static_cast<std::size_t>(h % dim);
    const double sign = (h >> 63) != 0 ? -1.0 : 1.0;
    v[bucket] += sign;
  }
  double n = 0.0;
  for (double x : v) n += x * x;
  if (n == 0.0) {
    v[0] = 1.0;
    return v;
  }
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

}  // namespace crag
