#pragma once

#include <stdexcept>
#include <string>

namespace cpbs {

/// Failure categories. The CLI maps each one to a stable exit code.
enum class ErrorCode {
  domain,            // argument outside the mathematical domain
  dimension,         // mismatched sizes
  rank_deficient,    // singular design / weighted normal equations
  non_convergence,   // iterative solver gave up (carries the last iterate where relevant)
  io,                // file could not be read or written
  missing_column,
  non_integer_response,
  nan_cell,
  config,            // malformed configuration / report
  stale_fit,         // fit report does not belong to the supplied data
  too_many_failures  // replicate failure ceiling exceeded
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::domain: return "domain";
    case ErrorCode::dimension: return "dimension";
    case ErrorCode::rank_deficient: return "rank_deficient";
    case ErrorCode::non_convergence: return "non_convergence";
    case ErrorCode::io: return "io";
    case ErrorCode::missing_column: return "missing_column";
    case ErrorCode::non_integer_response: return "non_integer_response";
    case ErrorCode::nan_cell: return "nan_cell";
    case ErrorCode::config: return "config";
    case ErrorCode::stale_fit: return "stale_fit";
    case ErrorCode::too_many_failures: return "too_many_failures";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cpbs
