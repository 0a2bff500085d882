#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace stn {

enum class ErrorKind {
  NotPositiveDefinite,
  DimensionMismatch,
  LengthMismatch,
  ZeroVector,
  NonFiniteInput,
  NonFiniteLoss,
  ZeroProbability,
  InvalidConfig,
  InvalidSpec,
  InsufficientData,
  FormatError,
  ChecksumMismatch,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so that callers (the
/// CLI in particular) can map it onto a stable exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  /// Byte offset for FormatError raised while parsing a file.
  std::optional<std::size_t> offset() const noexcept { return offset_; }
  /// Support-class index for errors raised by per-class metric evaluation.
  std::optional<std::size_t> class_index() const noexcept { return class_index_; }

  Error& at_offset(std::size_t off) {
    offset_ = off;
    return *this;
  }
  Error& at_class(std::size_t idx) {
    class_index_ = idx;
    return *this;
  }

 private:
  ErrorKind kind_;
  std::optional<std::size_t> offset_;
  std::optional<std::size_t> class_index_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::NonFiniteInput: return "NonFiniteInput";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::ZeroProbability: return "ZeroProbability";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::InsufficientData: return "InsufficientData";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::ChecksumMismatch: return "ChecksumMismatch";
  }
  return "Error";
}

}  // namespace stn
