#include "xmal/error.hpp"

namespace xmal {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kUnloaded: return "unloaded";
    case ErrorKind::kCorruptFile: return "corrupt-file";
    case ErrorKind::kConfigMismatch: return "config-mismatch";
    case ErrorKind::kMissingFile: return "missing-file";
    case ErrorKind::kMalformed: return "malformed";
    case ErrorKind::kDuplicate: return "duplicate";
    case ErrorKind::kExhausted: return "exhausted";
    case ErrorKind::kFrozenViolation: return "frozen-violation";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

}  // namespace xmal
