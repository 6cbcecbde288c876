#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace commshim {

enum class ErrorCode {
  usage,
  config,
  startup,
  count_overflow,
  channel,
  truncation,
  busy,
  cancelled,
  connection,
  connection_refused,
  protocol,
  io,
  correctness,
  stalled,
};

std::string_view to_string(ErrorCode code) noexcept;

// Every failure raised by the library carries one of the codes above so
// callers (and the CLI exit-code mapping) can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace commshim
