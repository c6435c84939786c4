#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mfbdsde {

enum class ErrorCode {
  NonpositiveHorizon,
  ZeroSteps,
  LengthMismatch,
  UnequalSupportSize,
  DimMismatch,
  NonpositiveWeight,
  StepTooSmall,
  NonfiniteState,
  MissingDerivative,
  MissingDerivativeField,
  ThetaOffGrid,
  PicardDivergence,
  RegressionSingular,
  NonAffineG,
  Unsupported,
  InsufficientLadder,
  SchemaMismatch,
  ConfigError,
  InvalidArgument,
};

constexpr std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::NonpositiveHorizon: return "NonpositiveHorizon";
    case ErrorCode::ZeroSteps: return "ZeroSteps";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::UnequalSupportSize: return "UnequalSupportSize";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::NonpositiveWeight: return "NonpositiveWeight";
    case ErrorCode::StepTooSmall: return "StepTooSmall";
    case ErrorCode::NonfiniteState: return "NonfiniteState";
    case ErrorCode::MissingDerivative: return "MissingDerivative";
    case ErrorCode::MissingDerivativeField: return "MissingDerivativeField";
    case ErrorCode::ThetaOffGrid: return "ThetaOffGrid";
    case ErrorCode::PicardDivergence: return "PicardDivergence";
    case ErrorCode::RegressionSingular: return "RegressionSingular";
    case ErrorCode::NonAffineG: return "NonAffineG";
    case ErrorCode::Unsupported: return "Unsupported";
    case ErrorCode::InsufficientLadder: return "InsufficientLadder";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
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

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) throw Error(code, what);
}

}  // namespace mfbdsde
