// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dinolens {

enum class ErrorKind {
  Dimension,
  Format,
  Validation,
  Numeric,
  Contract,
  Degenerate,
  Io,
};

const char* to_string(ErrorKind kind) noexcept;

/// Base for every error raised by the core. The C API maps `kind()` onto its
/// status codes; everything else surfaces as an internal error.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define DINOLENS_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

DINOLENS_DEFINE_ERROR(DimensionError, Dimension)
DINOLENS_DEFINE_ERROR(FormatError, Format)
DINOLENS_DEFINE_ERROR(ValidationError, Validation)
DINOLENS_DEFINE_ERROR(NumericError, Numeric)
DINOLENS_DEFINE_ERROR(ContractError, Contract)
DINOLENS_DEFINE_ERROR(DegenerateError, Degenerate)
DINOLENS_DEFINE_ERROR(IoError, Io)

#undef DINOLENS_DEFINE_ERROR

}  // namespace dinolens
