#pragma once

#include <stdexcept>
#include <string>

namespace bamm {

enum class ErrorCode {
  invalid_argument,
  parse_error,
  estimation_error,
  singular_design,
  numeric_error,
  io_error,
  inconsistent_mechanism,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void throw_error(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

}  // namespace bamm
