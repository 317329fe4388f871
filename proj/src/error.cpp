#include "csw/error.hpp"

namespace csw {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kFormat: return "FormatError";
    case ErrorCode::kVersionMismatch: return "VersionMismatch";
    case ErrorCode::kIndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::kEmptyStream: return "EmptyStream";
    case ErrorCode::kConfig: return "ConfigError";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kClipTooShort: return "ClipTooShort";
    case ErrorCode::kArchMismatch: return "ArchMismatch";
    case ErrorCode::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::kEmptySplit: return "EmptySplit";
    case ErrorCode::kBitsExhausted: return "BitsExhausted";
    case ErrorCode::kRateOutOfRange: return "RateOutOfRange";
    case ErrorCode::kBadSize: return "BadSize";
    case ErrorCode::kTooShort: return "TooShort";
    case ErrorCode::kBatchTooSmall: return "BatchTooSmall";
    case ErrorCode::kDomain: return "DomainError";
    case ErrorCode::kIdleTimeout: return "IdleTimeout";
    case ErrorCode::kInternal: return "InternalError";
  }
  return "Unknown";
}

IndexOutOfRange::IndexOutOfRange(std::size_t frame, int slot, std::uint32_t value, std::uint32_t limit)
    : Error(ErrorCode::kIndexOutOfRange,
            "codeword index out of range at frame " + std::to_string(frame) + ", slot " + std::to_string(slot) +
                ": " + std::to_string(value) + " >= " + std::to_string(limit)),
      frame_(frame),
      slot_(slot),
      value_(value) {}

FormatError::FormatError(std::uint64_t offset, const std::string& reason)
    : Error(ErrorCode::kFormat, "format error at byte " + std::to_string(offset) + ": " + reason), offset_(offset) {}

ClipTooShort::ClipTooShort(std::size_t frames, std::size_t minimum)
    : Error(ErrorCode::kClipTooShort,
            "clip has " + std::to_string(frames) + " frames, model needs at least " + std::to_string(minimum)),
      frames_(frames),
      minimum_(minimum) {}

}  // namespace csw
