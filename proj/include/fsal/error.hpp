#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fsal {

enum class Errc {
  shape_mismatch,
  unknown_layer,
  non_finite,
  stale_cache,
  zero_norm,
  invalid_argument,
  degenerate_pair,
  unknown_architecture,
  io,
  checksum,
  version,
  truncated,
  divergence,
  insufficient_data,
  constraint_violation,
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::unknown_layer: return "unknown_layer";
    case Errc::non_finite: return "non_finite";
    case Errc::stale_cache: return "stale_cache";
    case Errc::zero_norm: return "zero_norm";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::degenerate_pair: return "degenerate_pair";
    case Errc::unknown_architecture: return "unknown_architecture";
    case Errc::io: return "io";
    case Errc::checksum: return "checksum";
    case Errc::version: return "version";
    case Errc::truncated: return "truncated";
    case Errc::divergence: return "divergence";
    case Errc::insufficient_data: return "insufficient_data";
    case Errc::constraint_violation: return "constraint_violation";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

  // Input errors are caused by the caller (bad flags, files, configs);
  // everything else indicates a bug or a numerical failure.
  bool is_input_error() const noexcept {
    switch (code_) {
      case Errc::invalid_argument:
      case Errc::unknown_architecture:
      case Errc::io:
      case Errc::checksum:
      case Errc::version:
      case Errc::truncated:
      case Errc::insufficient_data:
      case Errc::shape_mismatch:
        return true;
      default:
        return false;
    }
  }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace fsal
