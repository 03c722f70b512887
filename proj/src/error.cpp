// SPDX-License-Identifier: Apache-2.0
#include "vaguide/error.hpp"

namespace vaguide {

const char *to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape: return "shape";
    case ErrorCode::format: return "format";
    case ErrorCode::truncated: return "truncated";
    case ErrorCode::checksum: return "checksum";
    case ErrorCode::data: return "data";
    case ErrorCode::insufficient_history: return "insufficient_history";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

}  // namespace vaguide
