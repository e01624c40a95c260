#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kwash {

enum class ErrorKind {
  kUsage,
  kConfig,
  kFormat,
  kIo,
  kShapeMismatch,
  kTokenOutOfRange,
  kUnknownTemplate,
  kInsufficientData,
  kVocabMismatch,
  kSingularSystem,
  kNoConvergence,
  kDivergence,
};

std::string_view to_string(ErrorKind kind);

// Numerical failures map to a different process exit code than bad input.
inline bool is_numerical(ErrorKind kind) {
  return kind == ErrorKind::kSingularSystem ||
         kind == ErrorKind::kNoConvergence || kind == ErrorKind::kDivergence;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace kwash
