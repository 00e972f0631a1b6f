// SPDX-License-Identifier: Apache-2.0
#include "common/error.hpp"

namespace dinolens {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::Degenerate: return "degenerate error";
    case ErrorKind::Io: return "i/o error";
  }
  return "error";
}

}  // namespace dinolens
