#include "csw/cover_model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "csw/error.hpp"
#include "csw/rng.hpp"

namespace csw {

std::size_t CoverModel::row_index(int slot, const CodewordFrame& previous, const CodewordFrame& current) const {
  switch (slot) {
    case 0:
      return previous[0];
    case 1:
      return static_cast<std::size_t>(intra_bucket(current[0], codebook_sizes[0])) * codebook_sizes[1] + previous[1];
    default:
      return static_cast<std::size_t>(intra_bucket(current[1], codebook_sizes[1])) * codebook_sizes[2] + previous[2];
  }
}

namespace {

void fill_dirichlet_rows(TransitionTable& table, std::size_t rows, std::size_t states, double alpha, Rng& rng) {
  table.states = states;
  table.probs.assign(rows * states, 0.0);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    // Tiny alpha can underflow every draw to zero; redraw the row.
    while (sum <= 0.0) {
      sum = 0.0;
      for (std::size_t c = 0; c < states; ++c) {
        table(r, c) = gamma(rng);
        sum += table(r, c);
      }
    }
    for (std::size_t c = 0; c < states; ++c) table(r, c) /= sum;
  }
}

std::vector<double> cumulative(const TransitionTable& table) {
  std::vector<double> cdf(table.probs.size());
  for (std::size_t r = 0; r < table.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < table.states; ++c) {
      acc += table(r, c);
      cdf[r * table.states + c] = acc;
    }
  }
  return cdf;
}

std::uint16_t sample_row(const std::vector<double>& cdf, std::size_t row, std::size_t states, double u) {
  const auto first = cdf.begin() + static_cast<std::ptrdiff_t>(row * states);
  const auto last = first + static_cast<std::ptrdiff_t>(states);
  // Scale by the row total so rounding in the cumulative sum cannot push u
  // past the end.
  const double target = u * *(last - 1);
  const auto it = std::upper_bound(first, last, target);
  const auto idx = static_cast<std::size_t>(it - first);
  return static_cast<std::uint16_t>(std::min(idx, states - 1));
}

}  // namespace

CoverModel make_cover_model(const CodebookSizes& sizes, double alpha, std::uint64_t seed) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw Error(ErrorCode::kConfig, "alpha must be positive");
  for (auto s : sizes) {
    if (s == 0) throw Error(ErrorCode::kConfig, "codebook sizes must be positive");
  }
  CoverModel model;
  model.codebook_sizes = sizes;
  model.alpha = alpha;
  model.seed = seed;
  Rng rng(derive_seed(seed, 0xC0FEu));
  fill_dirichlet_rows(model.transitions[0], sizes[0], sizes[0], alpha, rng);
  fill_dirichlet_rows(model.transitions[1], kIntraFrameBuckets * std::size_t{sizes[1]}, sizes[1], alpha, rng);
  fill_dirichlet_rows(model.transitions[2], kIntraFrameBuckets * std::size_t{sizes[2]}, sizes[2], alpha, rng);
  return model;
}

void validate_cover_model(const CoverModel& model) {
  const std::array<std::size_t, kSlots> expected_rows{
      model.codebook_sizes[0], kIntraFrameBuckets * std::size_t{model.codebook_sizes[1]},
      kIntraFrameBuckets * std::size_t{model.codebook_sizes[2]}};
  for (int j = 0; j < kSlots; ++j) {
    const auto& t = model.transitions[static_cast<std::size_t>(j)];
    if (t.states != model.codebook_sizes[static_cast<std::size_t>(j)] || t.rows() != expected_rows[static_cast<std::size_t>(j)] ||
        t.probs.size() != t.rows() * t.states) {
      throw Error(ErrorCode::kConfig, "transition table " + std::to_string(j) + " has the wrong shape");
    }
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < t.states; ++c) {
        if (!(t(r, c) >= 0.0)) throw Error(ErrorCode::kConfig, "negative transition probability");
        sum += t(r, c);
      }
      if (std::abs(sum - 1.0) > 1e-9) {
        throw Error(ErrorCode::kConfig, "row " + std::to_string(r) + " of table " + std::to_string(j) + " sums to " +
                                            std::to_string(sum));
      }
    }
  }
}

CodewordClip gen_cover(const CoverModel& model, std::size_t n_frames, std::uint64_t seed,
                       std::uint16_t frame_duration_ms) {
  if (n_frames == 0) throw Error(ErrorCode::kInvalidArgument, "n_frames must be >= 1");
  validate_cover_model(model);
  std::array<std::vector<double>, kSlots> cdf;
  for (int j = 0; j < kSlots; ++j) cdf[static_cast<std::size_t>(j)] = cumulative(model.transitions[static_cast<std::size_t>(j)]);

  Rng rng(derive_seed(seed, 0xF4A3E5u));
  CodewordClip clip;
  clip.codebook_sizes = model.codebook_sizes;
  clip.frame_duration_ms = frame_duration_ms;
  clip.frames.resize(n_frames);

  if (model.initial_frame) {
    clip.frames[0] = *model.initial_frame;
  } else {
    for (int j = 0; j < kSlots; ++j) {
      const auto size = model.codebook_sizes[static_cast<std::size_t>(j)];
      clip.frames[0][j] = static_cast<std::uint16_t>(std::min<double>(size - 1, std::floor(uniform01(rng) * size)));
    }
  }
  for (std::size_t t = 1; t < n_frames; ++t) {
    const CodewordFrame& prev = clip.frames[t - 1];
    CodewordFrame& cur = clip.frames[t];
    for (int j = 0; j < kSlots; ++j) {
      const auto states = model.codebook_sizes[static_cast<std::size_t>(j)];
      cur[j] = sample_row(cdf[static_cast<std::size_t>(j)], model.row_index(j, prev, cur), states, uniform01(rng));
    }
  }
  validate_clip(clip);
  return clip;
}

}  // namespace csw
