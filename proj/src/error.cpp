#include "kwash/error.hpp"

namespace kwash {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage: return "UsageError";
    case ErrorKind::kConfig: return "ConfigError";
    case ErrorKind::kFormat: return "FormatError";
    case ErrorKind::kIo: return "IoError";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kTokenOutOfRange: return "TokenOutOfRange";
    case ErrorKind::kUnknownTemplate: return "UnknownTemplate";
    case ErrorKind::kInsufficientData: return "InsufficientData";
    case ErrorKind::kVocabMismatch: return "VocabMismatch";
    case ErrorKind::kSingularSystem: return "SingularSystem";
    case ErrorKind::kNoConvergence: return "NoConvergence";
    case ErrorKind::kDivergence: return "Divergence";
  }
  return "Error";
}

}  // namespace kwash
