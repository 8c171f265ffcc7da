#include "dmae/error.hpp"

namespace dmae {

std::string_view code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUsage: return "E_USAGE";
    case ErrorCode::kData: return "E_DATA";
    case ErrorCode::kConfig: return "E_CONFIG";
    case ErrorCode::kDimension: return "E_DIMENSION";
    case ErrorCode::kContract: return "E_CONTRACT";
    case ErrorCode::kDivergence: return "E_DIVERGENCE";
    case ErrorCode::kBadMagic: return "E_CKPT_MAGIC";
    case ErrorCode::kVersionMismatch: return "E_CKPT_VERSION";
    case ErrorCode::kTruncated: return "E_CKPT_TRUNCATED";
    case ErrorCode::kInconsistent: return "E_CKPT_INCONSISTENT";
    case ErrorCode::kIo: return "E_IO";
  }
  return "E_UNKNOWN";
}

int exit_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUsage: return 2;
    case ErrorCode::kData:
    case ErrorCode::kIo:
    case ErrorCode::kBadMagic:
    case ErrorCode::kVersionMismatch:
    case ErrorCode::kTruncated:
    case ErrorCode::kInconsistent: return 3;
    case ErrorCode::kConfig:
    case ErrorCode::kDimension:
    case ErrorCode::kContract: return 4;
    case ErrorCode::kDivergence: return 5;
  }
  return 1;
}

}  // namespace dmae
