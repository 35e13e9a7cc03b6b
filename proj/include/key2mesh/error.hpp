#pragma once

#include <stdexcept>
#include <string>

namespace k2m {

enum class ErrorCode {
  Dimension,
  DegenerateBatch,
  InvalidProbability,
  Contract,
  SecondOrderUnsupported,
  NonFinite,
  Degenerate,
  Validation,
  BehindCamera,
  Underdetermined,
  NonConvergence,
  BadMagic,
  Truncated,
  Invariant,
  Parse,
  Io,
  Config,
};

const char* error_code_name(ErrorCode code);

/// Single exception type; `code()` distinguishes the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace k2m
