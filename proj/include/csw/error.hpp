#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace csw {

// Numeric values are part of the C API (see csw/c_api.h); append only.
enum class ErrorCode : int {
  kInvalidArgument = 1,
  kIo = 2,
  kFormat = 3,
  kVersionMismatch = 4,
  kIndexOutOfRange = 5,
  kEmptyStream = 6,
  kConfig = 7,
  kShapeMismatch = 8,
  kClipTooShort = 9,
  kArchMismatch = 10,
  kNonFiniteGradient = 11,
  kEmptySplit = 12,
  kBitsExhausted = 13,
  kRateOutOfRange = 14,
  kBadSize = 15,
  kTooShort = 16,
  kBatchTooSmall = 17,
  kDomain = 18,
  kIdleTimeout = 19,
  kInternal = 20,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class IndexOutOfRange : public Error {
 public:
  IndexOutOfRange(std::size_t frame, int slot, std::uint32_t value, std::uint32_t limit);
  std::size_t frame() const noexcept { return frame_; }
  int slot() const noexcept { return slot_; }
  std::uint32_t value() const noexcept { return value_; }

 private:
  std::size_t frame_;
  int slot_;
  std::uint32_t value_;
};

/// Malformed binary input. `offset` is the byte position where decoding
/// could not continue.
class FormatError : public Error {
 public:
  FormatError(std::uint64_t offset, const std::string& reason);
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ClipTooShort : public Error {
 public:
  ClipTooShort(std::size_t frames, std::size_t minimum);
  std::size_t frames() const noexcept { return frames_; }
  std::size_t minimum() const noexcept { return minimum_; }

 private:
  std::size_t frames_;
  std::size_t minimum_;
};

}  // namespace csw
