#pragma once

#include <stdexcept>
#include <string>

namespace odics {

// Exit codes surfaced by the CLI. Data errors are reported as config errors
// because both mean "the inputs are unusable".
enum class ExitCode : int {
  kOk = 0,
  kConfig = 1,
  kProtocol = 2,
  kNumeric = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Shape mismatch, unknown preset/key, invalid hyperparameter.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ExitCode::kConfig, "config error: " + what) {}
};

/// Label outside its label space, malformed table row.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what)
      : Error(ExitCode::kConfig, "data error: " + what) {}
};

/// A learner broke the streaming contract (budget overrun, rewind).
class ProtocolViolation : public Error {
 public:
  explicit ProtocolViolation(const std::string& what)
      : Error(ExitCode::kProtocol, "protocol violation: " + what) {}
};

/// Non-finite loss or gradient during training.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ExitCode::kNumeric, "numeric failure: " + what) {}
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace odics
