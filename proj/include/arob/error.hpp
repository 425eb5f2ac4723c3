#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace arob {

// Failure categories, mapped one-to-one onto CLI exit codes.
enum class ErrorKind { usage = 1, data = 2, run = 3 };

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::data: return "data";
    case ErrorKind::run: return "run";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct UsageError : Error {
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

// Malformed files, shape mismatches, invalid numeric input.
struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct ShapeError : DataError {
  using DataError::DataError;
};

struct FormatError : DataError {
  using DataError::DataError;
};

// Training divergence, non-finite intermediate values.
struct RunError : Error {
  explicit RunError(const std::string& what) : Error(ErrorKind::run, what) {}
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail
}  // namespace arob
