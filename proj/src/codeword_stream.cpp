#include "csw/codeword_stream.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "csw/error.hpp"

namespace csw {
namespace {

void put_u16(std::uint8_t* out, std::uint16_t v) {
  out[0] = static_cast<std::uint8_t>(v & 0xFF);
  out[1] = static_cast<std::uint8_t>(v >> 8);
}

void put_u64(std::uint8_t* out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::uint16_t get_u16(const std::uint8_t* in) {
  return static_cast<std::uint16_t>(in[0] | (in[1] << 8));
}

std::uint64_t get_u64(const std::uint8_t* in) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | in[i];
  return v;
}

}  // namespace

const CodewordClip& validate_clip(const CodewordClip& clip) {
  for (int slot = 0; slot < kSlots; ++slot) {
    if (clip.codebook_sizes[static_cast<std::size_t>(slot)] == 0) {
      throw Error(ErrorCode::kInvalidArgument, "codebook size must be positive");
    }
  }
  for (std::size_t i = 0; i < clip.frames.size(); ++i) {
    for (int slot = 0; slot < kSlots; ++slot) {
      const auto limit = clip.codebook_sizes[static_cast<std::size_t>(slot)];
      if (clip.frames[i][slot] >= limit) throw IndexOutOfRange(i, slot, clip.frames[i][slot], limit);
    }
  }
  return clip;
}

std::vector<CodewordClip> slice_clips(const CodewordClip& stream, std::size_t clip_len_frames) {
  if (clip_len_frames == 0) throw Error(ErrorCode::kInvalidArgument, "clip length must be >= 1");
  if (stream.empty()) throw Error(ErrorCode::kEmptyStream, "cannot slice an empty stream");
  const std::size_t count = stream.size() / clip_len_frames;
  std::vector<CodewordClip> clips;
  clips.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    CodewordClip clip;
    clip.codebook_sizes = stream.codebook_sizes;
    clip.frame_duration_ms = stream.frame_duration_ms;
    const auto first = stream.frames.begin() + static_cast<std::ptrdiff_t>(c * clip_len_frames);
    clip.frames.assign(first, first + static_cast<std::ptrdiff_t>(clip_len_frames));
    clips.push_back(std::move(clip));
  }
  return clips;
}

NormalizedClip normalize(const CodewordClip& clip, InputScaling scaling) {
  NormalizedClip out;
  out.matrix.resize(kSlots, static_cast<Eigen::Index>(clip.size()));
  std::array<double, kSlots> scale{};
  for (int j = 0; j < kSlots; ++j) {
    const auto size = clip.codebook_sizes[static_cast<std::size_t>(j)];
    // A one-entry codebook only ever holds index 0.
    scale[static_cast<std::size_t>(j)] = (scaling == InputScaling::kRaw || size <= 1) ? 1.0 : 1.0 / (size - 1);
  }
  for (std::size_t i = 0; i < clip.size(); ++i) {
    for (int j = 0; j < kSlots; ++j) {
      out.matrix(j, static_cast<Eigen::Index>(i)) = clip.frames[i][j] * scale[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

std::array<std::uint8_t, kContainerHeaderBytes> encode_header(const ContainerHeader& header) {
  std::array<std::uint8_t, kContainerHeaderBytes> out{};
  std::memcpy(out.data(), kContainerMagic.data(), kContainerMagic.size());
  put_u16(out.data() + 4, kContainerVersion);
  for (int j = 0; j < kSlots; ++j) put_u16(out.data() + 6 + 2 * j, header.codebook_sizes[static_cast<std::size_t>(j)]);
  put_u16(out.data() + 12, header.frame_duration_ms);
  put_u64(out.data() + 14, header.frame_count);
  return out;
}

ContainerHeader decode_header(std::span<const std::uint8_t, kContainerHeaderBytes> bytes) {
  if (std::memcmp(bytes.data(), kContainerMagic.data(), kContainerMagic.size()) != 0) {
    throw FormatError(0, "bad magic, expected \"CWST\"");
  }
  const auto version = get_u16(bytes.data() + 4);
  if (version != kContainerVersion) {
    throw Error(ErrorCode::kVersionMismatch,
                "unsupported container version " + std::to_string(version) + " (expected " +
                    std::to_string(kContainerVersion) + ")");
  }
  ContainerHeader header;
  for (int j = 0; j < kSlots; ++j) {
    header.codebook_sizes[static_cast<std::size_t>(j)] = get_u16(bytes.data() + 6 + 2 * j);
    if (header.codebook_sizes[static_cast<std::size_t>(j)] == 0) {
      throw FormatError(static_cast<std::uint64_t>(6 + 2 * j), "codebook size is zero");
    }
  }
  header.frame_duration_ms = get_u16(bytes.data() + 12);
  if (header.frame_duration_ms == 0) throw FormatError(12, "frame duration is zero");
  header.frame_count = get_u64(bytes.data() + 14);
  return header;
}

void encode_frame(const CodewordFrame& frame, std::span<std::uint8_t, kFrameRecordBytes> out) {
  for (int j = 0; j < kSlots; ++j) put_u16(out.data() + 2 * j, frame[j]);
}

CodewordFrame decode_frame(std::span<const std::uint8_t, kFrameRecordBytes> bytes, const CodebookSizes& sizes,
                           std::uint64_t offset) {
  CodewordFrame frame;
  for (int j = 0; j < kSlots; ++j) {
    frame[j] = get_u16(bytes.data() + 2 * j);
    if (frame[j] >= sizes[static_cast<std::size_t>(j)]) {
      throw FormatError(offset + static_cast<std::uint64_t>(2 * j),
                        "codeword index " + std::to_string(frame[j]) + " exceeds codebook size " +
                            std::to_string(sizes[static_cast<std::size_t>(j)]) + " in slot " + std::to_string(j));
    }
  }
  return frame;
}

std::vector<std::uint8_t> encode_container(const CodewordClip& clip) {
  validate_clip(clip);
  std::vector<std::uint8_t> out(kContainerHeaderBytes + kFrameRecordBytes * clip.size());
  const auto header = encode_header({clip.codebook_sizes, clip.frame_duration_ms, clip.size()});
  std::copy(header.begin(), header.end(), out.begin());
  for (std::size_t i = 0; i < clip.size(); ++i) {
    encode_frame(clip.frames[i],
                 std::span<std::uint8_t, kFrameRecordBytes>(out.data() + kContainerHeaderBytes + i * kFrameRecordBytes,
                                                            kFrameRecordBytes));
  }
  return out;
}

CodewordClip decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kContainerHeaderBytes) {
    // Report the first byte that disagrees with the magic, else the end.
    for (std::size_t i = 0; i < std::min(bytes.size(), kContainerMagic.size()); ++i) {
      if (bytes[i] != static_cast<std::uint8_t>(kContainerMagic[i])) throw FormatError(0, "bad magic");
    }
    throw FormatError(bytes.size(), "truncated header");
  }
  const auto header = decode_header(bytes.first<kContainerHeaderBytes>());
  const std::uint64_t available = (bytes.size() - kContainerHeaderBytes) / kFrameRecordBytes;
  std::uint64_t count = header.frame_count;
  if (count == kOpenEndedFrameCount) {
    count = available;
    if ((bytes.size() - kContainerHeaderBytes) % kFrameRecordBytes != 0) {
      throw FormatError(bytes.size(), "truncated frame record");
    }
  } else if (count > available) {
    throw FormatError(bytes.size(), "truncated frame record (header declares " + std::to_string(count) +
                                        " frames, " + std::to_string(available) + " present)");
  } else if (kContainerHeaderBytes + count * kFrameRecordBytes != bytes.size()) {
    throw FormatError(kContainerHeaderBytes + count * kFrameRecordBytes, "trailing bytes after last frame");
  }

  CodewordClip clip;
  clip.codebook_sizes = header.codebook_sizes;
  clip.frame_duration_ms = header.frame_duration_ms;
  clip.frames.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t offset = kContainerHeaderBytes + i * kFrameRecordBytes;
    clip.frames[i] = decode_frame(bytes.subspan(offset).first<kFrameRecordBytes>(), header.codebook_sizes, offset);
  }
  return clip;
}

std::uint64_t write_container(const CodewordClip& clip, const std::filesystem::path& path) {
  const auto bytes = encode_container(clip);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
  return bytes.size();
}

CodewordClip read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::kIo, "read failed: " + path.string());
  return decode_container(bytes);
}

std::filesystem::path sidecar_path(const std::filesystem::path& container_path) {
  auto p = container_path;
  p.replace_extension(".json");
  return p;
}

void write_sidecar(const std::filesystem::path& container_path, const nlohmann::json& metadata) {
  const auto path = sidecar_path(container_path);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << metadata.dump(1) << '\n';
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

std::optional<nlohmann::json> read_sidecar(const std::filesystem::path& container_path) {
  const auto path = sidecar_path(container_path);
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormat, "malformed sidecar " + path.string() + ": " + e.what());
  }
}

}  // namespace csw
