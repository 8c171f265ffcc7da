#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dmae {

enum class ErrorCode {
  kUsage,
  kData,
  kConfig,
  kDimension,
  kContract,
  kDivergence,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kInconsistent,
  kIo,
};

/// Machine-readable identifier, e.g. "E_CONFIG".
std::string_view code_name(ErrorCode code);

/// Process exit status used by the command-line tool for this error class.
int exit_status(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace dmae
