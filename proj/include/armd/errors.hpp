#pragma once

#include <stdexcept>
#include <string>

namespace armd {

// Process exit codes used by the command line tool.
enum class ExitCode : int {
  ok = 0,
  internal = 1,
  config = 2,
  data = 3,
  protocol = 4,
};

class Error : public std::runtime_error {
 public:
  Error(const std::string& what, ExitCode code) : std::runtime_error(what), code_(code) {}
  ExitCode exit_code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Programming errors inside the numeric core: wrong shapes, bad indices,
// misuse of the tape or optimizer, non-finite values.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what, ExitCode::internal) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error("index error: " + what, ExitCode::internal) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage error: " + what, ExitCode::internal) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what, ExitCode::internal) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, ExitCode::config) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error: " + what, ExitCode::data) {}
};

class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& what) : Error("protocol error: " + what, ExitCode::protocol) {}
};

}  // namespace armd
