#pragma once

#include <stdexcept>
#include <string>

namespace mdn {

enum class ErrorCode {
  kInvalidArgument,
  kDegenerateMesh,
  kDegenerateRotation,
  kBehindCamera,
  kUnsupportedFormat,
  kInvalidFile,
  kIo,
  kPrecondition,
  kDegenerateEstimate,
  kConfiguration,
  kNonFinite,
  kInternal,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kDegenerateMesh: return "degenerate-mesh";
    case ErrorCode::kDegenerateRotation: return "degenerate-rotation";
    case ErrorCode::kBehindCamera: return "behind-camera";
    case ErrorCode::kUnsupportedFormat: return "unsupported-format";
    case ErrorCode::kInvalidFile: return "invalid-file";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kPrecondition: return "precondition";
    case ErrorCode::kDegenerateEstimate: return "degenerate-estimate";
    case ErrorCode::kConfiguration: return "configuration";
    case ErrorCode::kNonFinite: return "non-finite";
    case ErrorCode::kInternal: return "internal";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define MDN_CHECK(cond, code, msg)              \
  do {                                          \
    if (!(cond)) throw ::mdn::Error((code), (msg)); \
  } while (0)

}  // namespace mdn
