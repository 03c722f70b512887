// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace vaguide {

enum class ErrorCode {
  invalid_argument,
  shape,
  format,     // bad magic / version / malformed header
  truncated,
  checksum,
  data,       // semantically invalid data (e.g. missing plane marks)
  insufficient_history,
  numeric,    // NaN / Inf encountered
  io,
};

const char *to_string(ErrorCode code);

// Every failure raised by the library carries a code so the CLI can map it
// onto an exit status without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string &what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string &what) {
  throw Error(code, what);
}

}  // namespace vaguide
