#pragma once

#include <stdexcept>
#include <string>

namespace vitbind {

// Failure categories map onto CLI exit codes (see exit_code()).
enum class ErrorKind { config, data, numeric, unsupported };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class UnsupportedError : public Error {
 public:
  explicit UnsupportedError(const std::string& what) : Error(ErrorKind::unsupported, what) {}
};

// Archive parse failures carry the byte position where parsing stopped.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t position)
      : DataError(what + " (at byte " + std::to_string(position) + ")"), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::numeric: return 4;
    case ErrorKind::unsupported: return 3;
  }
  return 1;
}

}  // namespace vitbind
