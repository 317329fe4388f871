#pragma once

// Shared fixtures for the unit tests.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include <doctest.h>

#include "csw/codeword_stream.hpp"
#include "csw/error.hpp"
#include "csw/nn.hpp"
#include "csw/rng.hpp"

namespace csw::test {

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("csw_test_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline CodewordClip random_clip(std::size_t frames, std::uint64_t seed, CodebookSizes sizes = kDefaultCodebookSizes) {
  Rng rng(seed);
  CodewordClip clip;
  clip.codebook_sizes = sizes;
  clip.frames.resize(frames);
  for (auto& f : clip.frames) {
    for (int s = 0; s < kSlots; ++s) f[s] = static_cast<std::uint16_t>(rng() % sizes[static_cast<std::size_t>(s)]);
  }
  return clip;
}

inline nn::Matrix random_matrix(nn::Index rows, nn::Index cols, Rng& rng, double scale = 1.0) {
  nn::Matrix m(rows, cols);
  for (nn::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * uniform01(rng) - 1.0) * scale;
  return m;
}

/// The code of the csw::Error thrown by `f`; kInternal plus a failure if
/// nothing is thrown.
inline ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an exception");
  return ErrorCode::kInternal;
}

}  // namespace csw::test
