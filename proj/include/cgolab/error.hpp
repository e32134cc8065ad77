#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cgolab {

enum class ErrorKind {
  RankMismatch,
  RankDeficient,
  NotOrthonormal,
  DegenerateZeta,
  NonPositiveGamma,
  RadiusExceeded,
  GridMismatch,
  LinearSolveFailure,
  SmallnessViolated,
  NewtonDiverged,
  TruncationTooLow,
  NeumannDiverging,
  DomainEscapesCube,
  ExponentBlowup,
  FrameMismatch,
  SupportEscapesOmega,
  NyquistViolated,
  StageInconsistent,
  ConfigInvalid,
  CacheCorrupt,
};

inline const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::RankMismatch: return "RankMismatch";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::NotOrthonormal: return "NotOrthonormal";
    case ErrorKind::DegenerateZeta: return "DegenerateZeta";
    case ErrorKind::NonPositiveGamma: return "NonPositiveGamma";
    case ErrorKind::RadiusExceeded: return "RadiusExceeded";
    case ErrorKind::GridMismatch: return "GridMismatch";
    case ErrorKind::LinearSolveFailure: return "LinearSolveFailure";
    case ErrorKind::SmallnessViolated: return "SmallnessViolated";
    case ErrorKind::NewtonDiverged: return "NewtonDiverged";
    case ErrorKind::TruncationTooLow: return "TruncationTooLow";
    case ErrorKind::NeumannDiverging: return "NeumannDiverging";
    case ErrorKind::DomainEscapesCube: return "DomainEscapesCube";
    case ErrorKind::ExponentBlowup: return "ExponentBlowup";
    case ErrorKind::FrameMismatch: return "FrameMismatch";
    case ErrorKind::SupportEscapesOmega: return "SupportEscapesOmega";
    case ErrorKind::NyquistViolated: return "NyquistViolated";
    case ErrorKind::StageInconsistent: return "StageInconsistent";
    case ErrorKind::ConfigInvalid: return "ConfigInvalid";
    case ErrorKind::CacheCorrupt: return "CacheCorrupt";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(kind_name(kind)) + ": " + msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

/// Carries the numerical null space of an underdetermined reconstruction.
class RankDeficientError : public Error {
 public:
  RankDeficientError(std::size_t nullity, std::vector<std::vector<double>> null_vectors)
      : Error(ErrorKind::RankDeficient,
              "sample set leaves a null space of dimension " + std::to_string(nullity)),
        nullity_(nullity),
        null_vectors_(std::move(null_vectors)) {}
  std::size_t nullity() const { return nullity_; }
  const std::vector<std::vector<double>>& null_vectors() const { return null_vectors_; }

 private:
  std::size_t nullity_;
  std::vector<std::vector<double>> null_vectors_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

}  // namespace cgolab
