#pragma once

// Real-time detection over a framed codeword byte stream: the .cwst header
// followed by frame records, read from a file, standard input or one TCP
// connection. An ingestion thread cuts the stream into windows of W frames
// every H frames; the caller's thread classifies them in order.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "csw/codeword_stream.hpp"
#include "csw/csw_model.hpp"

namespace csw {

/// Raw bytes behind a FrameSource.
class ByteSource {
 public:
  virtual ~ByteSource() = default;
  /// Reads up to out.size() bytes; 0 means end of stream. Throws IoError and
  /// IdleTimeout.
  virtual std::size_t read(std::span<std::uint8_t> out) = 0;
  /// Makes a blocked read() give up soon (it then reports end of stream).
  virtual void cancel() noexcept {}
};

struct SourceOptions {
  /// No byte for this long raises IdleTimeout; zero waits forever.
  std::chrono::milliseconds idle_timeout{0};
};

std::unique_ptr<ByteSource> open_file_bytes(const std::filesystem::path& path, const SourceOptions& options = {});
std::unique_ptr<ByteSource> stdin_bytes(const SourceOptions& options = {});
/// Listens on 127.0.0.1:`port` and accepts one connection; the idle timeout
/// also bounds the wait for it. Port 0 picks a free port, reported through
/// `bound_port` before the accept.
std::unique_ptr<ByteSource> tcp_bytes(std::uint16_t port, const SourceOptions& options = {},
                                      std::function<void(std::uint16_t)> bound_port = {});
std::unique_ptr<ByteSource> memory_bytes(std::vector<std::uint8_t> bytes);

/// Validated frames in arrival order.
class FrameSource {
 public:
  explicit FrameSource(std::unique_ptr<ByteSource> bytes);

  /// The next frame, or nullopt at a clean end: an empty stream, the declared
  /// frame count reached, or (open-ended count) end of input on a record
  /// boundary. Throws FormatError with the byte offset of the first bad
  /// record, and whatever the byte source throws.
  std::optional<CodewordFrame> next();

  /// Valid once the first next() has read the header.
  const std::optional<ContainerHeader>& header() const noexcept { return header_; }
  std::uint64_t frames_read() const noexcept { return frames_; }
  void cancel() noexcept { bytes_->cancel(); }

 private:
  // Fills `out` completely; returns the bytes read before end of stream.
  std::size_t read_full(std::span<std::uint8_t> out);

  std::unique_ptr<ByteSource> bytes_;
  std::optional<ContainerHeader> header_;
  bool done_ = false;
  std::uint64_t frames_ = 0;
  std::uint64_t offset_ = 0;
};

/// Every frame of the source; throws like FrameSource::next.
std::vector<CodewordFrame> ingest(FrameSource& source);

/// The most recent W frames, with a window due whenever
/// frames_seen >= W and (frames_seen - W) % H == 0.
class SlidingBuffer {
 public:
  /// Throws InvalidArgument for W == 0 or H == 0.
  SlidingBuffer(std::size_t window, std::size_t hop);

  /// Returns true when a window ends at this frame.
  bool push(const CodewordFrame& frame);
  /// The last W frames in order (call after push() returned true).
  CodewordClip window(const CodebookSizes& sizes, std::uint16_t frame_duration_ms) const;

  std::size_t window_length() const noexcept { return window_; }
  std::size_t hop() const noexcept { return hop_; }
  std::uint64_t frames_seen() const noexcept { return seen_; }

 private:
  std::size_t window_;
  std::size_t hop_;
  std::vector<CodewordFrame> ring_;
  std::uint64_t seen_ = 0;
};

struct DetectionEvent {
  std::uint64_t start = 0;  // first frame of the window
  std::uint64_t end = 0;    // one past the last frame; end - start = W
  double probability = 0.0;
  bool stego = false;
  double latency_ms = 0.0;  // inference only
  double timestamp = 0.0;   // Unix seconds when the verdict was made
};

/// {start, end, p, verdict, latency_ms, ts}; verdict is "stego" or "cover".
nlohmann::json to_json(const DetectionEvent& e);

struct DetectOptions {
  std::size_t window = 1000;
  std::size_t hop = 100;
  std::optional<double> threshold;  // the model's when unset
  std::size_t queue_windows = 4;
};

struct DetectSummary {
  std::uint64_t frames = 0;
  std::uint64_t events = 0;
  bool stopped = false;  // the sink asked to stop
};

/// Receives events in window order; return false to stop.
using EventSink = std::function<bool(const DetectionEvent&)>;

/// Synchronous form of the same pipeline: feed frames, get events.
class Detector {
 public:
  /// Throws ClipTooShort when W is below the model's minimum clip length and
  /// InvalidArgument for H == 0.
  Detector(const CswModel& model, const DetectOptions& options, CodebookSizes sizes = kDefaultCodebookSizes,
           std::uint16_t frame_duration_ms = kDefaultFrameDurationMs);

  std::optional<DetectionEvent> push(const CodewordFrame& frame);

 private:
  const CswModel& model_;
  double threshold_;
  SlidingBuffer buffer_;
  CodebookSizes sizes_;
  std::uint16_t frame_ms_;
};

/// Classifies one window exactly as CswModel::predict does.
DetectionEvent classify_window(const CswModel& model, const CodewordClip& window, std::uint64_t start,
                               double threshold);

/// Runs ingestion on its own thread, feeding a queue of at most
/// options.queue_windows windows (a full queue blocks ingestion, frames are
/// never dropped), and classifies on the calling thread. Events for windows
/// completed before an ingestion error are delivered before it is rethrown.
/// Throws ClipTooShort when W is below the model minimum.
DetectSummary sliding_detect(FrameSource& source, const CswModel& model, const DetectOptions& options,
                             const EventSink& sink);

}  // namespace csw
