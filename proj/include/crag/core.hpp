#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace crag {

using Tick = std::int64_t;
using EntryId = std::uint64_t;
using Vec = std::vector<double>;

enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  DuplicateId,
  InvariantViolation,
  OutOfOrderTick,
  UnresolvedEntryId,
  EmptyBatchAfterSelection,
  Divergence,
  EmptyResults,
  DegenerateBaseline,
  WindowMismatch,
  UnparseablePlan,
  NoApplicableRule,
  ToolFailure,
  InvalidArguments,
  BackendFailure,
  ParseError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::OutOfOrderTick: return "OutOfOrderTick";
    case ErrorCode::UnresolvedEntryId: return "UnresolvedEntryId";
    case ErrorCode::EmptyBatchAfterSelection: return "EmptyBatchAfterSelection";
    case ErrorCode::Divergence: return "Divergence";
    case ErrorCode::EmptyResults: return "EmptyResults";
    case ErrorCode::DegenerateBaseline: return "DegenerateBaseline";
    case ErrorCode::WindowMismatch: return "WindowMismatch";
    case ErrorCode::UnparseablePlan: return "UnparseablePlan";
    case ErrorCode::NoApplicableRule: return "NoApplicableRule";
    case ErrorCode::ToolFailure: return "ToolFailure";
    case ErrorCode::InvalidArguments: return "InvalidArguments";
    case ErrorCode::BackendFailure: return "BackendFailure";
    case ErrorCode::ParseError: return "ParseError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

/// Loss values above this are treated as divergence by every solver.
inline constexpr double kDivergenceLimit = 1e6;

inline void check_divergence(double loss, std::string_view where) {
  if (!std::isfinite(loss) || loss > kDivergenceLimit) {
    throw Error(ErrorCode::Divergence, std::string(where) + " loss " + std::to_string(loss));
  }
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace crag
