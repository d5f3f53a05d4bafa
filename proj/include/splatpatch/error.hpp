#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace splatpatch {

enum class ErrorKind {
  EmptyInput,
  InsufficientPoints,
  DegenerateCloud,
  InvalidArgument,
  MissingNormals,
  InvalidState,
  NonFiniteInput,
  NonFiniteGradient,
  FormatError,
  MissingFile,
  ShapeError,
  BadMagic,
  VersionMismatch,
  UnexpectedEof,
  IoError,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::InsufficientPoints: return "InsufficientPoints";
    case ErrorKind::DegenerateCloud: return "DegenerateCloud";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::MissingNormals: return "MissingNormals";
    case ErrorKind::InvalidState: return "InvalidState";
    case ErrorKind::NonFiniteInput: return "NonFiniteInput";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::UnexpectedEof: return "UnexpectedEof";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying its kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// True for kinds that come from bad files or datasets rather than numerics.
  bool is_data_error() const noexcept {
    switch (kind_) {
      case ErrorKind::FormatError:
      case ErrorKind::MissingFile:
      case ErrorKind::ShapeError:
      case ErrorKind::BadMagic:
      case ErrorKind::VersionMismatch:
      case ErrorKind::UnexpectedEof:
      case ErrorKind::IoError:
      case ErrorKind::EmptyInput:
      case ErrorKind::InsufficientPoints:
      case ErrorKind::DegenerateCloud:
      case ErrorKind::MissingNormals:
        return true;
      default:
        return false;
    }
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace splatpatch
