#pragma once

#include <stdexcept>
#include <string>

namespace collab {

/// Broad category of a failure, used by callers (and the CLI exit-code
/// mapping) to react without parsing messages.
enum class ErrorKind {
  dimension,       // shape mismatch, bad extents
  parameter,       // out-of-range numeric argument
  numeric,         // non-finite values
  usage,           // API misuse (e.g. backward on a non-scalar)
  input,           // malformed loss inputs (non one-hot targets, ...)
  degenerate,      // degenerate statistics or peers
  config,          // invalid configuration
  format,          // malformed file contents
  io,              // filesystem failures
  invalid_check,   // non-deterministic finite-difference target
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace collab
