// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace textdistill {

enum class Errc {
  ShapeMismatch,
  NonFiniteResult,
  FilterTooLong,
  EmptyTime,
  LabelOutOfRange,
  NotScalar,
  DetachedTensor,
  MalformedRow,
  LabelOutOfDeclaredRange,
  DimMismatch,
  UnparseableFloat,
  IdOutOfRange,
  EmptyDataset,
  RealSampleModeNeedsDataset,
  DetachedGraph,
  NonFiniteGradient,
  TooLargeForOracle,
  EmptySource,
  ClassTooSmall,
  InvalidConfig,
  CorruptArtifact,
  ArtifactMismatch,
  Io,
};

constexpr std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteResult: return "NonFiniteResult";
    case Errc::FilterTooLong: return "FilterTooLong";
    case Errc::EmptyTime: return "EmptyTime";
    case Errc::LabelOutOfRange: return "LabelOutOfRange";
    case Errc::NotScalar: return "NotScalar";
    case Errc::DetachedTensor: return "DetachedTensor";
    case Errc::MalformedRow: return "MalformedRow";
    case Errc::LabelOutOfDeclaredRange: return "LabelOutOfDeclaredRange";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::UnparseableFloat: return "UnparseableFloat";
    case Errc::IdOutOfRange: return "IdOutOfRange";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::RealSampleModeNeedsDataset: return "RealSampleModeNeedsDataset";
    case Errc::DetachedGraph: return "DetachedGraph";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::TooLargeForOracle: return "TooLargeForOracle";
    case Errc::EmptySource: return "EmptySource";
    case Errc::ClassTooSmall: return "ClassTooSmall";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::CorruptArtifact: return "CorruptArtifact";
    case Errc::ArtifactMismatch: return "ArtifactMismatch";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure in the library surfaces as an Error carrying a stable code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Errors tied to an input line (CSV rows, embedding files).
class LineError : public Error {
 public:
  LineError(Errc code, std::size_t line, const std::string& what)
      : Error(code, "line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace textdistill
