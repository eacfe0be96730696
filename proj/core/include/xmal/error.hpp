#pragma once

#include <stdexcept>
#include <string>

namespace xmal {

enum class ErrorKind {
  kShape,
  kInvalidArgument,
  kUnloaded,
  kCorruptFile,
  kConfigMismatch,
  kMissingFile,
  kMalformed,
  kDuplicate,
  kExhausted,
  kFrozenViolation,
  kIo,
};

const char* to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so callers (and the CLI)
/// can branch on the category without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

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

}  // namespace xmal
