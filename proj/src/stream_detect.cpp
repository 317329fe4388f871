#include "csw/stream_detect.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <exception>
#include <mutex>
#include <thread>

#include "csw/error.hpp"

namespace csw {
namespace {

using Clock = std::chrono::steady_clock;

// Poll in short slices so cancel() and the idle deadline are noticed.
constexpr int kPollSliceMs = 50;

[[noreturn]] void throw_errno(const std::string& what) {
  throw Error(ErrorCode::kIo, what + ": " + std::strerror(errno));
}

// Waits until `fd` is readable. Returns false if cancelled first.
bool wait_readable(int fd, std::chrono::milliseconds idle, const std::atomic<bool>& cancelled, const char* what) {
  const auto deadline = Clock::now() + idle;
  for (;;) {
    if (cancelled.load()) return false;
    pollfd p{fd, POLLIN, 0};
    const int r = ::poll(&p, 1, kPollSliceMs);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw_errno(std::string("poll on ") + what);
    }
    if (r > 0) return true;
    if (idle.count() > 0 && Clock::now() >= deadline) {
      throw Error(ErrorCode::kIdleTimeout, std::string(what) + " idle for more than " +
                                               std::to_string(idle.count()) + " ms");
    }
  }
}

class FdBytes : public ByteSource {
 public:
  FdBytes(int fd, bool owned, std::chrono::milliseconds idle, const char* what)
      : fd_(fd), owned_(owned), idle_(idle), what_(what) {}
  ~FdBytes() override {
    if (owned_) ::close(fd_);
  }
  FdBytes(const FdBytes&) = delete;
  FdBytes& operator=(const FdBytes&) = delete;

  std::size_t read(std::span<std::uint8_t> out) override {
    for (;;) {
      if (!wait_readable(fd_, idle_, cancelled_, what_)) return 0;
      const ssize_t n = ::read(fd_, out.data(), out.size());
      if (n >= 0) return static_cast<std::size_t>(n);
      if (errno != EINTR && errno != EAGAIN) throw_errno(std::string("read from ") + what_);
    }
  }
  void cancel() noexcept override { cancelled_.store(true); }

 private:
  int fd_;
  bool owned_;
  std::chrono::milliseconds idle_;
  const char* what_;
  std::atomic<bool> cancelled_{false};
};

class MemoryBytes : public ByteSource {
 public:
  explicit MemoryBytes(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}
  std::size_t read(std::span<std::uint8_t> out) override {
    const std::size_t n = std::min(out.size(), bytes_.size() - pos_);
    std::copy_n(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), n, out.begin());
    pos_ += n;
    return n;
  }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

double unix_seconds() {
  return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

double resolve_threshold(const CswModel& model, const DetectOptions& options) {
  const double t = options.threshold.value_or(model.config().threshold);
  classify(0.5, t);  // validates
  return t;
}

void check_window(const CswModel& model, const DetectOptions& options) {
  if (options.window < model.min_clip_frames()) throw ClipTooShort(options.window, model.min_clip_frames());
  if (options.hop == 0) throw Error(ErrorCode::kInvalidArgument, "hop must be at least one frame");
  if (options.queue_windows == 0) throw Error(ErrorCode::kInvalidArgument, "the window queue needs room for one");
}

}  // namespace

std::unique_ptr<ByteSource> open_file_bytes(const std::filesystem::path& path, const SourceOptions& options) {
  const int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) throw_errno("cannot open " + path.string());
  return std::make_unique<FdBytes>(fd, true, options.idle_timeout, "file");
}

std::unique_ptr<ByteSource> stdin_bytes(const SourceOptions& options) {
  return std::make_unique<FdBytes>(STDIN_FILENO, false, options.idle_timeout, "standard input");
}

std::unique_ptr<ByteSource> tcp_bytes(std::uint16_t port, const SourceOptions& options,
                                      std::function<void(std::uint16_t)> bound_port) {
  const int listener = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (listener < 0) throw_errno("socket");
  struct Closer {
    int fd;
    ~Closer() { ::close(fd); }
  } closer{listener};
  const int yes = 1;
  ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::bind(listener, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) < 0) {
    throw_errno("bind to port " + std::to_string(port));
  }
  if (::listen(listener, 1) < 0) throw_errno("listen");
  socklen_t len = sizeof addr;
  if (::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len) < 0) throw_errno("getsockname");
  if (bound_port) bound_port(ntohs(addr.sin_port));
  const std::atomic<bool> never{false};
  wait_readable(listener, options.idle_timeout, never, "TCP listener");
  const int conn = ::accept4(listener, nullptr, nullptr, SOCK_CLOEXEC);
  if (conn < 0) throw_errno("accept");
  return std::make_unique<FdBytes>(conn, true, options.idle_timeout, "TCP connection");
}

std::unique_ptr<ByteSource> memory_bytes(std::vector<std::uint8_t> bytes) {
  return std::make_unique<MemoryBytes>(std::move(bytes));
}

// ---------------------------------------------------------------------------

FrameSource::FrameSource(std::unique_ptr<ByteSource> bytes) : bytes_(std::move(bytes)) {
  if (!bytes_) throw Error(ErrorCode::kInvalidArgument, "frame source needs a byte source");
}

std::size_t FrameSource::read_full(std::span<std::uint8_t> out) {
  std::size_t got = 0;
  while (got < out.size()) {
    const std::size_t n = bytes_->read(out.subspan(got));
    if (n == 0) break;
    got += n;
  }
  return got;
}

std::optional<CodewordFrame> FrameSource::next() {
  if (done_) return std::nullopt;
  if (!header_) {
    std::array<std::uint8_t, kContainerHeaderBytes> raw{};
    const std::size_t n = read_full(raw);
    if (n == 0) {
      done_ = true;
      return std::nullopt;
    }
    done_ = true;  // until the header proves sound
    if (n < raw.size()) throw FormatError(n, "truncated stream header");
    header_ = decode_header(raw);
    offset_ = kContainerHeaderBytes;
    done_ = false;
  }
  const std::uint64_t declared = header_->frame_count;
  if (declared != kOpenEndedFrameCount && frames_ == declared) {
    done_ = true;
    return std::nullopt;
  }
  std::array<std::uint8_t, kFrameRecordBytes> raw{};
  const std::size_t n = read_full(raw);
  if (n == 0) {
    done_ = true;
    if (declared == kOpenEndedFrameCount) return std::nullopt;
    throw FormatError(offset_, "stream ended after " + std::to_string(frames_) + " of " + std::to_string(declared) +
                                   " declared frames");
  }
  if (n < raw.size()) {
    done_ = true;
    throw FormatError(offset_ + n, "truncated frame record");
  }
  try {
    const CodewordFrame frame = decode_frame(raw, header_->codebook_sizes, offset_);
    offset_ += kFrameRecordBytes;
    ++frames_;
    return frame;
  } catch (...) {
    done_ = true;
    throw;
  }
}

std::vector<CodewordFrame> ingest(FrameSource& source) {
  std::vector<CodewordFrame> frames;
  while (auto f = source.next()) frames.push_back(*f);
  return frames;
}

// ---------------------------------------------------------------------------

SlidingBuffer::SlidingBuffer(std::size_t window, std::size_t hop) : window_(window), hop_(hop) {
  if (window == 0) throw Error(ErrorCode::kInvalidArgument, "window must be at least one frame");
  if (hop == 0) throw Error(ErrorCode::kInvalidArgument, "hop must be at least one frame");
  ring_.resize(window);
}

bool SlidingBuffer::push(const CodewordFrame& frame) {
  ring_[static_cast<std::size_t>(seen_ % window_)] = frame;
  ++seen_;
  return seen_ >= window_ && (seen_ - window_) % hop_ == 0;
}

CodewordClip SlidingBuffer::window(const CodebookSizes& sizes, std::uint16_t frame_duration_ms) const {
  if (seen_ < window_) throw Error(ErrorCode::kInvalidArgument, "fewer frames than one window so far");
  CodewordClip clip;
  clip.codebook_sizes = sizes;
  clip.frame_duration_ms = frame_duration_ms;
  clip.frames.reserve(window_);
  const std::uint64_t start = seen_ - window_;
  for (std::size_t i = 0; i < window_; ++i) clip.frames.push_back(ring_[static_cast<std::size_t>((start + i) % window_)]);
  return clip;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const DetectionEvent& e) {
  return {{"start", e.start},
          {"end", e.end},
          {"p", e.probability},
          {"verdict", e.stego ? "stego" : "cover"},
          {"latency_ms", e.latency_ms},
          {"ts", e.timestamp}};
}

DetectionEvent classify_window(const CswModel& model, const CodewordClip& window, std::uint64_t start,
                               double threshold) {
  const auto t0 = Clock::now();
  const Verdict v = model.predict(window, threshold);
  const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  DetectionEvent e;
  e.start = start;
  e.end = start + window.size();
  e.probability = v.probability;
  e.stego = v.stego;
  e.latency_ms = std::max(ms, 0.0);
  e.timestamp = unix_seconds();
  return e;
}

Detector::Detector(const CswModel& model, const DetectOptions& options, CodebookSizes sizes,
                   std::uint16_t frame_duration_ms)
    : model_(model),
      threshold_(resolve_threshold(model, options)),
      buffer_((check_window(model, options), options.window), options.hop),
      sizes_(sizes),
      frame_ms_(frame_duration_ms) {}

std::optional<DetectionEvent> Detector::push(const CodewordFrame& frame) {
  if (!buffer_.push(frame)) return std::nullopt;
  return classify_window(model_, buffer_.window(sizes_, frame_ms_), buffer_.frames_seen() - buffer_.window_length(),
                         threshold_);
}

DetectSummary sliding_detect(FrameSource& source, const CswModel& model, const DetectOptions& options,
                             const EventSink& sink) {
  check_window(model, options);
  const double threshold = resolve_threshold(model, options);

  struct Item {
    CodewordClip clip;
    std::uint64_t start = 0;
  };
  std::mutex mutex;
  std::condition_variable not_full;
  std::condition_variable not_empty;
  std::deque<Item> queue;
  bool ingest_done = false;
  bool stop = false;
  std::exception_ptr ingest_error;

  std::thread ingestion([&] {
    try {
      SlidingBuffer buffer(options.window, options.hop);
      while (auto frame = source.next()) {
        if (!buffer.push(*frame)) continue;
        const auto& h = *source.header();
        Item item{buffer.window(h.codebook_sizes, h.frame_duration_ms), buffer.frames_seen() - options.window};
        std::unique_lock lock(mutex);
        not_full.wait(lock, [&] { return queue.size() < options.queue_windows || stop; });
        if (stop) break;
        queue.push_back(std::move(item));
        not_empty.notify_one();
      }
    } catch (...) {
      ingest_error = std::current_exception();
    }
    std::lock_guard lock(mutex);
    ingest_done = true;
    not_empty.notify_one();
  });

  // Stops and joins ingestion however this function is left.
  struct Joiner {
    std::thread& thread;
    std::mutex& mutex;
    bool& stop;
    std::condition_variable& not_full;
    FrameSource& source;
    ~Joiner() {
      {
        std::lock_guard lock(mutex);
        stop = true;
      }
      not_full.notify_all();
      source.cancel();
      if (thread.joinable()) thread.join();
    }
  };

  DetectSummary summary;
  {
    Joiner joiner{ingestion, mutex, stop, not_full, source};
    for (;;) {
      std::unique_lock lock(mutex);
      not_empty.wait(lock, [&] { return !queue.empty() || ingest_done; });
      if (queue.empty()) break;
      Item item = std::move(queue.front());
      queue.pop_front();
      not_full.notify_one();
      lock.unlock();

      const DetectionEvent event = classify_window(model, item.clip, item.start, threshold);
      ++summary.events;
      if (!sink(event)) {
        summary.stopped = true;
        break;
      }
    }
  }
  summary.frames = source.frames_read();
  if (ingest_error && !summary.stopped) std::rethrow_exception(ingest_error);
  return summary;
}

}  // namespace csw
