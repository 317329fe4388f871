#include "csw/qim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <optional>

#include "csw/error.hpp"
#include "csw/rng.hpp"

namespace csw {

double Codebook::squared_distance(std::size_t a, std::size_t b) const {
  double d = 0.0;
  for (int k = 0; k < dim; ++k) {
    const double diff = vectors[a * static_cast<std::size_t>(dim) + static_cast<std::size_t>(k)] -
                        vectors[b * static_cast<std::size_t>(dim) + static_cast<std::size_t>(k)];
    d += diff * diff;
  }
  return d;
}

namespace {

// Index pair (a, b) of the first repeated pairwise distance, if any.
std::optional<std::pair<std::size_t, std::size_t>> find_distance_tie(const Codebook& cb) {
  struct Entry {
    double d;
    std::size_t a, b;
  };
  std::vector<Entry> entries;
  const auto n = cb.size();
  entries.reserve(n * (n - 1) / 2);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) entries.push_back({cb.squared_distance(a, b), a, b});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& x, const Entry& y) { return x.d < y.d; });
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].d == 0.0) return std::pair{entries[i].a, entries[i].b};
    if (i > 0 && entries[i].d == entries[i - 1].d) return std::pair{entries[i].a, entries[i].b};
  }
  return std::nullopt;
}

}  // namespace

Codebook gen_codebook(std::size_t size, int dim, std::uint64_t seed, int slot) {
  if (size < 2 || size % 2 != 0) {
    throw Error(ErrorCode::kBadSize, "codebook size must be even and >= 2, got " + std::to_string(size));
  }
  if (dim < 1) throw Error(ErrorCode::kBadSize, "codebook dimension must be >= 1");
  Rng rng(derive_seed(seed, 0xC0DEB00Cu));
  Codebook cb;
  cb.slot = slot;
  cb.dim = dim;
  cb.vectors.resize(size * static_cast<std::size_t>(dim));
  for (auto& v : cb.vectors) v = uniform01(rng);
  // Jitter until all distances are distinct; almost never loops.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const auto tie = find_distance_tie(cb);
    if (!tie) return cb;
    for (int k = 0; k < dim; ++k) {
      cb.vectors[tie->second * static_cast<std::size_t>(dim) + static_cast<std::size_t>(k)] +=
          (uniform01(rng) - 0.5) * 1e-6;
    }
  }
  throw Error(ErrorCode::kInternal, "could not separate codebook distances");
}

CnvPartition cnv_partition(const Codebook& codebook) {
  const auto n = codebook.size();
  if (n < 2) throw Error(ErrorCode::kBadSize, "codebook needs at least two codewords");
  CnvPartition part;
  part.nearest_neighbor.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = i;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = codebook.squared_distance(i, j);
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    part.nearest_neighbor[i] = static_cast<std::uint32_t>(arg);
  }

  // Undirected constraint graph: i -- nn(i). With distinct distances every
  // component is a tree once the single mutual pair is merged, so BFS
  // colouring always succeeds.
  std::vector<std::vector<std::uint32_t>> adjacency(n);
  for (std::size_t i = 0; i < n; ++i) {
    adjacency[i].push_back(part.nearest_neighbor[i]);
    adjacency[part.nearest_neighbor[i]].push_back(static_cast<std::uint32_t>(i));
  }
  constexpr std::uint8_t kUnset = 2;
  part.labels.assign(n, kUnset);
  std::deque<std::uint32_t> queue;
  for (std::size_t root = 0; root < n; ++root) {
    if (part.labels[root] != kUnset) continue;
    part.labels[root] = 0;
    queue.push_back(static_cast<std::uint32_t>(root));
    while (!queue.empty()) {
      const auto u = queue.front();
      queue.pop_front();
      for (const auto v : adjacency[u]) {
        if (part.labels[v] == kUnset) {
          part.labels[v] = static_cast<std::uint8_t>(1 - part.labels[u]);
          queue.push_back(v);
        } else if (part.labels[v] == part.labels[u]) {
          throw Error(ErrorCode::kInternal, "nearest-neighbour graph is not 2-colourable (tied distances?)");
        }
      }
    }
  }

  for (int b = 0; b < 2; ++b) {
    auto& table = part.nearest_in_class[static_cast<std::size_t>(b)];
    table.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (part.labels[i] == b) {
        table[i] = static_cast<std::uint32_t>(i);
        continue;
      }
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = i;
      for (std::size_t j = 0; j < n; ++j) {
        if (part.labels[j] != b) continue;
        const double d = codebook.squared_distance(i, j);
        if (d < best) {
          best = d;
          arg = j;
        }
      }
      table[i] = static_cast<std::uint32_t>(arg);
    }
  }
  return part;
}

CodebookSizes QimKey::sizes() const {
  CodebookSizes s{};
  for (int j = 0; j < kSlots; ++j) s[static_cast<std::size_t>(j)] = static_cast<std::uint16_t>(codebooks[static_cast<std::size_t>(j)].size());
  return s;
}

QimKey make_qim_key(const CodebookSizes& sizes, int dim, std::uint64_t seed) {
  QimKey key;
  for (int j = 0; j < kSlots; ++j) {
    const auto s = static_cast<std::size_t>(j);
    key.codebooks[s] = gen_codebook(sizes[s], dim, derive_seed(seed, s), j);
    key.partitions[s] = cnv_partition(key.codebooks[s]);
  }
  return key;
}

std::size_t EmbedRecord::embedded_frames() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

namespace {

void check_key_matches(const CodewordClip& clip, const QimKey& key) {
  if (clip.codebook_sizes != key.sizes()) {
    throw Error(ErrorCode::kInvalidArgument, "clip codebook sizes do not match the QIM key");
  }
}

}  // namespace

EmbedRecord qim_embed(const CodewordClip& cover, std::span<const std::uint8_t> bits, double embedding_rate,
                      const QimKey& key, std::uint64_t seed) {
  if (!(embedding_rate >= 0.0 && embedding_rate <= 1.0)) {
    throw Error(ErrorCode::kRateOutOfRange, "embedding rate must be in [0, 1]");
  }
  validate_clip(cover);
  check_key_matches(cover, key);

  EmbedRecord record;
  record.mask.resize(cover.size());
  Rng select(derive_seed(seed, 0x5E1EC7u));
  for (auto& m : record.mask) m = uniform01(select) < embedding_rate ? 1 : 0;

  const std::size_t needed = kSlots * record.embedded_frames();
  if (bits.size() < needed) {
    throw Error(ErrorCode::kBitsExhausted,
                "message has " + std::to_string(bits.size()) + " bits, embedding needs " + std::to_string(needed));
  }
  record.bits.assign(bits.begin(), bits.begin() + static_cast<std::ptrdiff_t>(needed));
  record.stego = cover;
  std::size_t next = 0;
  for (std::size_t i = 0; i < cover.size(); ++i) {
    if (!record.mask[i]) continue;
    for (int j = 0; j < kSlots; ++j) {
      const std::uint8_t bit = record.bits[next++] & 1;
      auto& index = record.stego.frames[i][j];
      index = key.partitions[static_cast<std::size_t>(j)].quantize(index, bit);
    }
  }
  return record;
}

std::vector<std::uint8_t> random_bits(std::size_t count, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xB175u));
  std::vector<std::uint8_t> bits(count);
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (i % 64 == 0) word = rng();
    bits[i] = static_cast<std::uint8_t>((word >> (i % 64)) & 1);
  }
  return bits;
}

EmbedRecord qim_embed_random(const CodewordClip& cover, double embedding_rate, const QimKey& key,
                             std::uint64_t seed) {
  // Capacity-sized message; qim_embed consumes only what the mask needs.
  const auto bits = random_bits(kSlots * cover.size(), seed);
  return qim_embed(cover, bits, embedding_rate, key, seed);
}

std::vector<std::uint8_t> qim_extract(const CodewordClip& clip, std::span<const std::uint8_t> mask,
                                      const QimKey& key) {
  if (mask.size() != clip.size()) throw Error(ErrorCode::kShapeMismatch, "mask length differs from clip length");
  check_key_matches(clip, key);
  std::vector<std::uint8_t> bits;
  for (std::size_t i = 0; i < clip.size(); ++i) {
    if (!mask[i]) continue;
    for (int j = 0; j < kSlots; ++j) bits.push_back(key.partitions[static_cast<std::size_t>(j)].label(clip.frames[i][j]));
  }
  return bits;
}

std::vector<std::uint8_t> qim_extract(const EmbedRecord& record, const QimKey& key) {
  return qim_extract(record.stego, record.mask, key);
}

double mean_displacement(const CodewordClip& cover, const CodewordClip& stego, const QimKey& key) {
  if (cover.size() != stego.size()) throw Error(ErrorCode::kShapeMismatch, "clips differ in length");
  if (cover.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < cover.size(); ++i) {
    for (int j = 0; j < kSlots; ++j) {
      total += std::sqrt(key.codebooks[static_cast<std::size_t>(j)].squared_distance(cover.frames[i][j], stego.frames[i][j]));
    }
  }
  return total / static_cast<double>(cover.size() * kSlots);
}

}  // namespace csw
