#pragma once

// Quantization index modulation over CNV-partitioned codebooks.
//
// Each codebook is split into two sub-codebooks so that every codeword's
// nearest neighbour sits in the opposite half. One message bit per slot is
// hidden by re-quantizing the slot's codeword into the sub-codebook named by
// the bit; the receiver reads the bit back as the codeword's label.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "csw/codeword_stream.hpp"

namespace csw {

/// `size` points in R^dim, stored row-major.
struct Codebook {
  int slot = 0;
  int dim = 3;
  std::vector<double> vectors;

  std::size_t size() const noexcept { return dim > 0 ? vectors.size() / static_cast<std::size_t>(dim) : 0; }
  std::span<const double> vector(std::size_t i) const {
    return {vectors.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
  double squared_distance(std::size_t a, std::size_t b) const;
};

/// Deterministic per seed. All vectors distinct with pairwise-distinct
/// distances. Throws BadSize unless size >= 2 and even.
Codebook gen_codebook(std::size_t size, int dim, std::uint64_t seed, int slot = 0);

struct CnvPartition {
  std::vector<std::uint8_t> labels;             // 0 or 1 per codeword
  std::vector<std::uint32_t> nearest_neighbor;  // by codebook distance
  // nearest_in_class[b][i]: closest codeword to i whose label is b (i itself
  // when labels[i] == b).
  std::array<std::vector<std::uint32_t>, 2> nearest_in_class;

  std::size_t size() const noexcept { return labels.size(); }
  std::uint8_t label(std::size_t i) const { return labels[i]; }
  std::uint16_t quantize(std::uint16_t index, std::uint8_t bit) const {
    return static_cast<std::uint16_t>(nearest_in_class[bit][index]);
  }
};

/// Two-colours the nearest-neighbour graph. Throws Internal if the colouring
/// fails, which cannot happen for a codebook with distinct distances.
CnvPartition cnv_partition(const Codebook& codebook);

/// Codebooks and partitions for all three slots; shared by embedder and
/// extractor.
struct QimKey {
  std::array<Codebook, kSlots> codebooks;
  std::array<CnvPartition, kSlots> partitions;

  CodebookSizes sizes() const;
};

QimKey make_qim_key(const CodebookSizes& sizes, int dim, std::uint64_t seed);

struct EmbedRecord {
  CodewordClip stego;
  std::vector<std::uint8_t> mask;  // 1 where the frame carries bits
  std::vector<std::uint8_t> bits;  // consumed message bits, 3 per masked frame

  std::size_t embedded_frames() const;
};

/// Frames are selected independently with probability `embedding_rate`
/// (drawn from `seed` before any bit is consumed). Each selected frame takes
/// three bits, one per slot. Throws RateOutOfRange, BitsExhausted.
EmbedRecord qim_embed(const CodewordClip& cover, std::span<const std::uint8_t> bits, double embedding_rate,
                      const QimKey& key, std::uint64_t seed);

/// As qim_embed, with uniform random message bits derived from `seed`.
EmbedRecord qim_embed_random(const CodewordClip& cover, double embedding_rate, const QimKey& key,
                             std::uint64_t seed);

std::vector<std::uint8_t> random_bits(std::size_t count, std::uint64_t seed);

/// Labels of the three codewords of every masked frame, in frame then slot
/// order.
std::vector<std::uint8_t> qim_extract(const CodewordClip& clip, std::span<const std::uint8_t> mask,
                                      const QimKey& key);
std::vector<std::uint8_t> qim_extract(const EmbedRecord& record, const QimKey& key);

/// Mean Euclidean distance in codebook space between corresponding codewords
/// of two equally long clips.
double mean_displacement(const CodewordClip& cover, const CodewordClip& stego, const QimKey& key);

}  // namespace csw
