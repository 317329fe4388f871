#pragma once

// Synthetic cover-stream generator.
//
// Inter-frame correlation: every slot follows a first-order Markov chain whose
// transition rows are Dirichlet(alpha) draws; small alpha gives sparse rows and
// therefore strong frame-to-frame dependence.
// Intra-frame correlation: the slot-2 chain is additionally conditioned on the
// quartile bucket of the current slot-1 codeword, and slot 3 on the bucket of
// slot 2, so the three codewords of a frame are coupled.

#include <cstdint>
#include <optional>
#include <vector>

#include "csw/codeword_stream.hpp"

namespace csw {

inline constexpr int kIntraFrameBuckets = 4;

/// Row-stochastic matrix stored row-major.
struct TransitionTable {
  std::size_t states = 0;
  std::vector<double> probs;

  std::size_t rows() const noexcept { return states == 0 ? 0 : probs.size() / states; }
  double operator()(std::size_t row, std::size_t col) const { return probs[row * states + col]; }
  double& operator()(std::size_t row, std::size_t col) { return probs[row * states + col]; }
};

struct CoverModel {
  CodebookSizes codebook_sizes = kDefaultCodebookSizes;
  double alpha = 0.1;
  std::uint64_t seed = 0;
  // slot 1: |L1| rows indexed by the previous a1.
  // slot 2: kIntraFrameBuckets * |L2| rows indexed by (bucket(a1_t), a2_{t-1}).
  // slot 3: kIntraFrameBuckets * |L3| rows indexed by (bucket(a2_t), a3_{t-1}).
  std::array<TransitionTable, kSlots> transitions;
  /// First frame; drawn uniformly per clip when unset.
  std::optional<CodewordFrame> initial_frame;

  std::size_t row_index(int slot, const CodewordFrame& previous, const CodewordFrame& current) const;
};

/// Quartile bucket of index `a` in a codebook of `size` entries.
constexpr int intra_bucket(std::uint32_t a, std::uint32_t size) noexcept {
  return static_cast<int>((static_cast<std::uint64_t>(a) * kIntraFrameBuckets) / size);
}

/// Samples every transition row from Dirichlet(alpha). Throws ConfigError for
/// alpha <= 0.
CoverModel make_cover_model(const CodebookSizes& sizes, double alpha, std::uint64_t seed);

/// Throws ConfigError unless every row is a probability vector (within 1e-9).
void validate_cover_model(const CoverModel& model);

CodewordClip gen_cover(const CoverModel& model, std::size_t n_frames, std::uint64_t seed,
                       std::uint16_t frame_duration_ms = kDefaultFrameDurationMs);

}  // namespace csw
