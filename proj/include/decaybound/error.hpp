/**
 * @file error.hpp
 * @brief Error codes and the exception type thrown across decaybound.
 */
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace decaybound {

enum class ErrorCode {
  InvalidArgument,
  DomainError,
  // geo
  EmptySourceSet,
  DuplicateUnitId,
  DuplicateSourceId,
  // decay models / functionals
  NonPositiveRate,
  NonPositiveTime,
  BoundaryUndefined,
  // estimation
  TooFewObservations,
  NonConvergence,
  SingularJacobian,
  NonPositiveOutcome,
  MissingResiduals,
  StratumTooSmall,
  NonPositiveKappa,
  InsufficientGroups,
  // pde
  UnstableTimestep,
  WindowTooSmall,
  // panel
  InvalidConfig,
  NoVariationInTreatment,
  UnbalancedPanel,
  InsufficientPrePeriods,
  EmptyBand,
  ModifierMissing,
  NoModifierVariation,
  // io
  MissingColumn,
  ParseError,
  EmptyFile,
  IoError,
};

/// Coarse grouping used by the CLI to pick an exit code.
enum class ErrorCategory { Config, Data, Estimation };

constexpr std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::EmptySourceSet: return "EmptySourceSet";
    case ErrorCode::DuplicateUnitId: return "DuplicateUnitId";
    case ErrorCode::DuplicateSourceId: return "DuplicateSourceId";
    case ErrorCode::NonPositiveRate: return "NonPositiveRate";
    case ErrorCode::NonPositiveTime: return "NonPositiveTime";
    case ErrorCode::BoundaryUndefined: return "BoundaryUndefined";
    case ErrorCode::TooFewObservations: return "TooFewObservations";
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::SingularJacobian: return "SingularJacobian";
    case ErrorCode::NonPositiveOutcome: return "NonPositiveOutcome";
    case ErrorCode::MissingResiduals: return "MissingResiduals";
    case ErrorCode::StratumTooSmall: return "StratumTooSmall";
    case ErrorCode::NonPositiveKappa: return "NonPositiveKappa";
    case ErrorCode::InsufficientGroups: return "InsufficientGroups";
    case ErrorCode::UnstableTimestep: return "UnstableTimestep";
    case ErrorCode::WindowTooSmall: return "WindowTooSmall";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NoVariationInTreatment: return "NoVariationInTreatment";
    case ErrorCode::UnbalancedPanel: return "UnbalancedPanel";
    case ErrorCode::InsufficientPrePeriods: return "InsufficientPrePeriods";
    case ErrorCode::EmptyBand: return "EmptyBand";
    case ErrorCode::ModifierMissing: return "ModifierMissing";
    case ErrorCode::NoModifierVariation: return "NoModifierVariation";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::EmptyFile: return "EmptyFile";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

constexpr ErrorCategory category_of(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::InvalidConfig:
    case ErrorCode::UnstableTimestep:
      return ErrorCategory::Config;
    case ErrorCode::NonConvergence:
    case ErrorCode::SingularJacobian:
    case ErrorCode::BoundaryUndefined:
    case ErrorCode::NoVariationInTreatment:
    case ErrorCode::NoModifierVariation:
    case ErrorCode::WindowTooSmall:
      return ErrorCategory::Estimation;
    default:
      return ErrorCategory::Data;
  }
}

/**
 * Exception carrying a machine-readable code. `details` holds auxiliary
 * items such as offending unit ids or a missing column name.
 */
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::vector<std::string> details = {})
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code),
        details_(std::move(details)) {}

  ErrorCode code() const noexcept { return code_; }
  ErrorCategory category() const noexcept { return category_of(code_); }
  const std::vector<std::string>& details() const noexcept { return details_; }

 private:
  ErrorCode code_;
  std::vector<std::string> details_;
};

}  // namespace decaybound
