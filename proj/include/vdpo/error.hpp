#pragma once

#include <stdexcept>
#include <string>

namespace vdpo {

// Coarse error classes. The CLI maps them onto its exit codes
// (config -> 2, io/parse/digest -> 3).
enum class ErrorKind {
  kInvalidArgument,
  kShape,
  kNumeric,
  kState,
  kConfig,
  kIo,
  kParse,
  kDigest,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error invalid_argument(const std::string& what) {
  return Error(ErrorKind::kInvalidArgument, what);
}

// A parse failure that knows which line of its input it came from.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(ErrorKind::kParse, "line " + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace vdpo
