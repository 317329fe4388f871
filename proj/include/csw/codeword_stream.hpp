#pragma once

// Codeword streams: three quantizer indices per speech frame, arranged as a
// 3 x N matrix (slot x frame). Clips are fixed-length slices of a stream and
// are the unit the detector classifies.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

namespace csw {

inline constexpr int kSlots = 3;

using CodebookSizes = std::array<std::uint16_t, kSlots>;

/// Three-stage LSF quantizer layout of the G.729 family: 7 + 5 + 5 bits.
inline constexpr CodebookSizes kDefaultCodebookSizes{128, 32, 32};
inline constexpr std::uint16_t kDefaultFrameDurationMs = 10;

struct CodewordFrame {
  std::array<std::uint16_t, kSlots> index{};

  std::uint16_t operator[](int slot) const { return index[static_cast<std::size_t>(slot)]; }
  std::uint16_t& operator[](int slot) { return index[static_cast<std::size_t>(slot)]; }
  bool operator==(const CodewordFrame&) const = default;
};

struct CodewordClip {
  std::vector<CodewordFrame> frames;
  CodebookSizes codebook_sizes = kDefaultCodebookSizes;
  std::uint16_t frame_duration_ms = kDefaultFrameDurationMs;

  std::size_t size() const noexcept { return frames.size(); }
  bool empty() const noexcept { return frames.empty(); }
  bool operator==(const CodewordClip&) const = default;
};

enum class InputScaling {
  kUnit,  // a / (|L| - 1), entries in [0, 1]
  kRaw,   // the index itself, for ablation
};

/// Network input: column i holds frame i, row j holds slot j.
struct NormalizedClip {
  Eigen::Matrix<double, kSlots, Eigen::Dynamic> matrix;

  Eigen::Index frames() const noexcept { return matrix.cols(); }
};

/// Returns `clip` unchanged if every index is below its codebook size.
/// Throws IndexOutOfRange naming the first offending (frame, slot).
const CodewordClip& validate_clip(const CodewordClip& clip);

/// Successive, non-overlapping clips of `clip_len_frames`; a trailing partial
/// clip is dropped. Throws EmptyStream for a zero-length stream.
std::vector<CodewordClip> slice_clips(const CodewordClip& stream, std::size_t clip_len_frames);

NormalizedClip normalize(const CodewordClip& clip, InputScaling scaling = InputScaling::kUnit);

// ---------------------------------------------------------------------------
// .cwst container
//
//   offset  size  field
//   0       4     magic "CWST"
//   4       2     version (u16, = 1)
//   6       6     codebook sizes, 3 x u16
//   12      2     frame duration in ms (u16)
//   14      8     frame count (u64); kOpenEndedFrameCount = read to end
//   22      6*n   frames, 3 x u16 codeword indices each
//
// All integers little-endian.

inline constexpr std::array<char, 4> kContainerMagic{'C', 'W', 'S', 'T'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 22;
inline constexpr std::size_t kFrameRecordBytes = 6;
inline constexpr std::uint64_t kOpenEndedFrameCount = ~std::uint64_t{0};

struct ContainerHeader {
  CodebookSizes codebook_sizes = kDefaultCodebookSizes;
  std::uint16_t frame_duration_ms = kDefaultFrameDurationMs;
  std::uint64_t frame_count = 0;
};

std::array<std::uint8_t, kContainerHeaderBytes> encode_header(const ContainerHeader& header);

/// Throws FormatError (bad magic, zero codebook size) or VersionMismatch.
ContainerHeader decode_header(std::span<const std::uint8_t, kContainerHeaderBytes> bytes);

void encode_frame(const CodewordFrame& frame, std::span<std::uint8_t, kFrameRecordBytes> out);

/// Decodes one frame record; `offset` is the record's position in the
/// enclosing byte stream and is reported if an index is out of range.
CodewordFrame decode_frame(std::span<const std::uint8_t, kFrameRecordBytes> bytes, const CodebookSizes& sizes,
                           std::uint64_t offset);

std::vector<std::uint8_t> encode_container(const CodewordClip& clip);
CodewordClip decode_container(std::span<const std::uint8_t> bytes);

/// Returns the number of bytes written. Throws IoError.
std::uint64_t write_container(const CodewordClip& clip, const std::filesystem::path& path);
CodewordClip read_container(const std::filesystem::path& path);

/// "clip.cwst" -> "clip.json".
std::filesystem::path sidecar_path(const std::filesystem::path& container_path);
void write_sidecar(const std::filesystem::path& container_path, const nlohmann::json& metadata);
/// Sidecars are optional: returns nullopt when the file does not exist.
std::optional<nlohmann::json> read_sidecar(const std::filesystem::path& container_path);

}  // namespace csw
