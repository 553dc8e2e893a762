#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tard {

enum class ErrorKind {
  kInvalidInput,
  kRange,
  kShape,
  kState,
  kDataset,
  kBatchComposition,
  kBatchSize,
  kInsufficientSamples,
  kNumeric,
  kFormat,
  kIncompatible,
  kIo,
  kUsage,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidInput: return "invalid input";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kState: return "state";
    case ErrorKind::kDataset: return "dataset";
    case ErrorKind::kBatchComposition: return "batch composition";
    case ErrorKind::kBatchSize: return "batch size";
    case ErrorKind::kInsufficientSamples: return "insufficient samples";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kIncompatible: return "incompatible";
    case ErrorKind::kIo: return "i/o";
    case ErrorKind::kUsage: return "usage";
  }
  return "unknown";
}

// All library failures are reported through this type; kind() categorizes
// the failure so callers (the CLI in particular) can map it to exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace tard
