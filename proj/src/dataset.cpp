#include "csw/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "csw/cover_model.hpp"
#include "csw/error.hpp"
#include "csw/rng.hpp"

namespace csw {

using nlohmann::json;

const char* to_string(Label label) noexcept { return label == Label::kStego ? "stego" : "cover"; }
const char* to_string(Split split) noexcept { return split == Split::kTest ? "test" : "train"; }

Label parse_label(const std::string& s) {
  if (s == "cover") return Label::kCover;
  if (s == "stego") return Label::kStego;
  throw Error(ErrorCode::kFormat, "unknown label '" + s + "'");
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw Error(ErrorCode::kInvalidArgument, "unknown split '" + s + "'");
}

DatasetSeeds DatasetSeeds::from_global(std::uint64_t seed) {
  return {derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3), derive_seed(seed, 4),
          derive_seed(seed, 5)};
}

void validate_dataset_config(const DatasetConfig& c) {
  if (c.clip_lengths_frames.empty()) throw Error(ErrorCode::kConfig, "clip_lengths_frames is empty");
  if (c.embedding_rates.empty()) throw Error(ErrorCode::kConfig, "embedding_rates is empty");
  if (c.n_per_class == 0) throw Error(ErrorCode::kConfig, "n_per_class must be positive");
  for (auto len : c.clip_lengths_frames) {
    if (len == 0) throw Error(ErrorCode::kConfig, "clip lengths must be positive");
  }
  for (auto r : c.embedding_rates) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorCode::kConfig, "embedding rate outside [0, 1]");
  }
  if (!(c.alpha > 0.0)) throw Error(ErrorCode::kConfig, "alpha must be positive");
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) throw Error(ErrorCode::kConfig, "train_fraction must be in (0, 1)");
  if (c.codebook_dim < 1) throw Error(ErrorCode::kConfig, "codebook_dim must be >= 1");
  if (c.frame_duration_ms == 0) throw Error(ErrorCode::kConfig, "frame_duration_ms must be positive");
  for (auto s : c.codebook_sizes) {
    if (s < 2 || s % 2 != 0) throw Error(ErrorCode::kConfig, "codebook sizes must be even and >= 2");
  }
}

DatasetConfig parse_dataset_config(const json& j) {
  try {
    DatasetConfig c;
    c.clip_lengths_frames = j.at("clip_lengths_frames").get<std::vector<std::size_t>>();
    c.embedding_rates = j.at("embedding_rates").get<std::vector<double>>();
    c.n_per_class = j.at("n_per_class").get<std::size_t>();
    c.alpha = j.value("alpha", c.alpha);
    if (j.contains("seeds")) {
      const auto& s = j.at("seeds");
      if (s.contains("global")) c.seeds = DatasetSeeds::from_global(s.at("global").get<std::uint64_t>());
      c.seeds.codebook = s.value("codebook", c.seeds.codebook);
      c.seeds.cover_model = s.value("cover_model", c.seeds.cover_model);
      c.seeds.cover = s.value("cover", c.seeds.cover);
      c.seeds.embed = s.value("embed", c.seeds.embed);
      c.seeds.split = s.value("split", c.seeds.split);
    }
    c.out_dir = j.value("out_dir", std::string{});
    if (j.contains("codebook_sizes")) {
      const auto v = j.at("codebook_sizes").get<std::vector<std::uint16_t>>();
      if (v.size() != kSlots) throw Error(ErrorCode::kConfig, "codebook_sizes needs three entries");
      std::copy(v.begin(), v.end(), c.codebook_sizes.begin());
    }
    c.codebook_dim = j.value("codebook_dim", c.codebook_dim);
    c.frame_duration_ms = j.value("frame_duration_ms", c.frame_duration_ms);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    validate_dataset_config(c);
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("dataset config: ") + e.what());
  }
}

json to_json(const DatasetConfig& c) {
  return json{{"clip_lengths_frames", c.clip_lengths_frames},
              {"embedding_rates", c.embedding_rates},
              {"n_per_class", c.n_per_class},
              {"alpha", c.alpha},
              {"seeds",
               {{"codebook", c.seeds.codebook},
                {"cover_model", c.seeds.cover_model},
                {"cover", c.seeds.cover},
                {"embed", c.seeds.embed},
                {"split", c.seeds.split}}},
              {"out_dir", c.out_dir.generic_string()},
              {"codebook_sizes", std::vector<std::uint16_t>(c.codebook_sizes.begin(), c.codebook_sizes.end())},
              {"codebook_dim", c.codebook_dim},
              {"frame_duration_ms", c.frame_duration_ms},
              {"train_fraction", c.train_fraction}};
}

bool ManifestFilter::accepts(const ManifestEntry& e) const {
  if (clip_len_frames && e.clip_len_frames != *clip_len_frames) return false;
  if (group_rate && std::abs(e.group_rate - *group_rate) > 1e-12) return false;
  return true;
}

std::vector<ManifestEntry> DatasetManifest::select(Split split, const ManifestFilter& filter) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == split && filter.accepts(e)) out.push_back(e);
  }
  return out;
}

QimKey DatasetManifest::qim_key() const {
  return make_qim_key(config.codebook_sizes, config.codebook_dim, config.seeds.codebook);
}

std::string bits_to_hex(const std::vector<std::uint8_t>& bits) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve((bits.size() + 7) / 8 * 2);
  for (std::size_t i = 0; i < bits.size(); i += 8) {
    unsigned byte = 0;
    for (std::size_t b = 0; b < 8 && i + b < bits.size(); ++b) byte |= (bits[i + b] & 1u) << b;
    out.push_back(kDigits[byte >> 4]);
    out.push_back(kDigits[byte & 0xF]);
  }
  return out;
}

std::vector<std::uint8_t> hex_to_bits(const std::string& hex, std::size_t count) {
  if (hex.size() != (count + 7) / 8 * 2) throw Error(ErrorCode::kFormat, "bit string has the wrong length");
  auto nibble = [](char c) -> unsigned {
    if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
    if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
    throw Error(ErrorCode::kFormat, "invalid hex digit in bit string");
  };
  std::vector<std::uint8_t> bits(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned byte = nibble(hex[i / 8 * 2]) << 4 | nibble(hex[i / 8 * 2 + 1]);
    bits[i] = static_cast<std::uint8_t>((byte >> (i % 8)) & 1u);
  }
  return bits;
}

namespace {

std::string format_rate(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", rate * 100.0);
  return buf;
}

std::string clip_name(const char* kind, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu.cwst", kind, i);
  return buf;
}

// Indices 0..n-1 split into a train prefix and test suffix after a seeded
// shuffle.
std::vector<Split> assign_splits(std::size_t n, double train_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  std::vector<Split> splits(n, Split::kTest);
  for (std::size_t k = 0; k < n_train; ++k) splits[order[k]] = Split::kTrain;
  return splits;
}

}  // namespace

DatasetManifest build_dataset(const DatasetConfig& config) {
  validate_dataset_config(config);
  if (config.out_dir.empty()) throw Error(ErrorCode::kConfig, "out_dir is required");
  std::error_code ec;
  std::filesystem::create_directories(config.out_dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + config.out_dir.string() + ": " + ec.message());

  const QimKey key = make_qim_key(config.codebook_sizes, config.codebook_dim, config.seeds.codebook);
  const CoverModel model = make_cover_model(config.codebook_sizes, config.alpha, config.seeds.cover_model);

  DatasetManifest manifest;
  manifest.root = config.out_dir;
  manifest.config = config;

  const std::size_t n = config.n_per_class;
  std::uint64_t group = 0;
  for (const auto len : config.clip_lengths_frames) {
    for (const auto rate : config.embedding_rates) {
      const std::string dir = "L" + std::to_string(len) + "_r" + format_rate(rate);
      std::filesystem::create_directories(config.out_dir / dir, ec);
      if (ec) throw Error(ErrorCode::kIo, "cannot create " + (config.out_dir / dir).string());

      // One long cover stream sliced into successive, non-overlapping clips:
      // the first n become covers, the next n are embedded.
      const std::uint64_t cover_seed = derive_seed(config.seeds.cover, group);
      const auto stream = gen_cover(model, 2 * n * len, cover_seed, config.frame_duration_ms);
      const auto clips = slice_clips(stream, len);
      const auto cover_splits = assign_splits(n, config.train_fraction, derive_seed(config.seeds.split, 2 * group));
      const auto stego_splits = assign_splits(n, config.train_fraction, derive_seed(config.seeds.split, 2 * group + 1));

      for (std::size_t i = 0; i < n; ++i) {
        const std::string rel = dir + "/" + clip_name("cover", i);
        write_container(clips[i], config.out_dir / rel);
        write_sidecar(config.out_dir / rel, json{{"label", "cover"},
                                                 {"embedding_rate", 0.0},
                                                 {"clip_len_frames", len},
                                                 {"cover_seed", cover_seed},
                                                 {"clip_index", i}});
        manifest.entries.push_back({rel, Label::kCover, 0.0, len, cover_splits[i], rate});
      }
      for (std::size_t i = 0; i < n; ++i) {
        const std::string rel = dir + "/" + clip_name("stego", i);
        const std::uint64_t embed_seed = derive_seed(config.seeds.embed, group * n + i);
        const auto record = qim_embed_random(clips[n + i], rate, key, embed_seed);
        write_container(record.stego, config.out_dir / rel);
        write_sidecar(config.out_dir / rel, json{{"label", "stego"},
                                                 {"embedding_rate", rate},
                                                 {"clip_len_frames", len},
                                                 {"cover_seed", cover_seed},
                                                 {"clip_index", n + i},
                                                 {"embed_seed", embed_seed},
                                                 {"codebook_seed", config.seeds.codebook},
                                                 {"embedded_frames", record.embedded_frames()},
                                                 {"mask", bits_to_hex(record.mask)},
                                                 {"message_bits", record.bits.size()},
                                                 {"message", bits_to_hex(record.bits)}});
        manifest.entries.push_back({rel, Label::kStego, rate, len, stego_splits[i], rate});
      }
      ++group;
    }
  }
  save_manifest(manifest, config.out_dir / kManifestFileName);
  return manifest;
}

json to_json(const DatasetManifest& manifest) {
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"path", e.path},
                       {"label", to_string(e.label)},
                       {"embedding_rate", e.embedding_rate},
                       {"clip_len_frames", e.clip_len_frames},
                       {"split", to_string(e.split)},
                       {"group_rate", e.group_rate}});
  }
  auto config = to_json(manifest.config);
  config.erase("out_dir");
  return json{{"format", "cswsteg-manifest"}, {"version", 1}, {"config", config}, {"entries", entries}};
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out << to_json(manifest).dump(1) << '\n';
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path.string());
  try {
    const auto j = json::parse(in);
    if (j.value("format", "") != "cswsteg-manifest") throw Error(ErrorCode::kFormat, "not a dataset manifest");
    if (j.value("version", 0) != 1) throw Error(ErrorCode::kVersionMismatch, "unsupported manifest version");
    DatasetManifest m;
    m.root = path.parent_path();
    auto config = j.at("config");
    config["out_dir"] = m.root.generic_string();
    m.config = parse_dataset_config(config);
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.path = e.at("path").get<std::string>();
      entry.label = parse_label(e.at("label").get<std::string>());
      entry.embedding_rate = e.at("embedding_rate").get<double>();
      entry.clip_len_frames = e.at("clip_len_frames").get<std::size_t>();
      entry.split = parse_split(e.at("split").get<std::string>());
      entry.group_rate = e.value("group_rate", entry.embedding_rate);
      m.entries.push_back(std::move(entry));
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, "malformed manifest " + path.string() + ": " + e.what());
  }
}

std::vector<Example> load_examples(const DatasetManifest& manifest, Split split, const ManifestFilter& filter) {
  std::vector<Example> out;
  for (const auto& e : manifest.select(split, filter)) {
    out.push_back({read_container(manifest.resolve(e)), e.label, e.embedding_rate, e.path});
  }
  return out;
}

std::vector<std::string> audit_stego(const DatasetManifest& manifest) {
  const QimKey key = manifest.qim_key();
  std::vector<std::string> failures;
  for (const auto& e : manifest.entries) {
    if (e.label != Label::kStego) continue;
    const auto path = manifest.resolve(e);
    const auto meta = read_sidecar(path);
    if (!meta) {
      failures.push_back(e.path);
      continue;
    }
    const auto clip = read_container(path);
    const auto mask = hex_to_bits(meta->at("mask").get<std::string>(), clip.size());
    const auto message =
        hex_to_bits(meta->at("message").get<std::string>(), meta->at("message_bits").get<std::size_t>());
    if (qim_extract(clip, mask, key) != message) failures.push_back(e.path);
  }
  return failures;
}

}  // namespace csw
