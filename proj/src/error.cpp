#include "key2mesh/error.hpp"

namespace k2m {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::Dimension: return "dimension error";
    case ErrorCode::DegenerateBatch: return "degenerate batch";
    case ErrorCode::InvalidProbability: return "invalid probability";
    case ErrorCode::Contract: return "contract error";
    case ErrorCode::SecondOrderUnsupported: return "second-order unsupported";
    case ErrorCode::NonFinite: return "non-finite value";
    case ErrorCode::Degenerate: return "degenerate input";
    case ErrorCode::Validation: return "validation error";
    case ErrorCode::BehindCamera: return "behind camera";
    case ErrorCode::Underdetermined: return "underdetermined";
    case ErrorCode::NonConvergence: return "non-convergence";
    case ErrorCode::BadMagic: return "bad magic";
    case ErrorCode::Truncated: return "truncated payload";
    case ErrorCode::Invariant: return "invariant violation";
    case ErrorCode::Parse: return "parse error";
    case ErrorCode::Io: return "io error";
    case ErrorCode::Config: return "config error";
  }
  return "error";
}

}  // namespace k2m
