#pragma once

#include <stdexcept>
#include <string>

namespace tinymol {

enum class ErrorCode {
  parse_error,
  range_error,
  io_error,
  empty_table,
  molecule_too_large,
  shape_mismatch,
  not_scalar,
  nan_gradient,
  checkpoint_io,
  insufficient_data,
  domain_error,
  config_error,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::parse_error: return "PARSE_ERROR";
    case ErrorCode::range_error: return "RANGE_ERROR";
    case ErrorCode::io_error: return "IO_ERROR";
    case ErrorCode::empty_table: return "EMPTY_TABLE";
    case ErrorCode::molecule_too_large: return "MOLECULE_TOO_LARGE";
    case ErrorCode::shape_mismatch: return "SHAPE_MISMATCH";
    case ErrorCode::not_scalar: return "NOT_SCALAR";
    case ErrorCode::nan_gradient: return "NAN_GRADIENT";
    case ErrorCode::checkpoint_io: return "CHECKPOINT_IO";
    case ErrorCode::insufficient_data: return "INSUFFICIENT_DATA";
    case ErrorCode::domain_error: return "DOMAIN_ERROR";
    case ErrorCode::config_error: return "CONFIG_ERROR";
  }
  return "UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tinymol
