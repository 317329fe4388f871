#pragma once

// Labelled cover/stego datasets on disk: .cwst clips with JSON sidecars plus a
// manifest.json listing every clip, its label and its train/test split.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csw/codeword_stream.hpp"
#include "csw/qim.hpp"

namespace csw {

enum class Label : int { kCover = 0, kStego = 1 };
enum class Split : int { kTrain = 0, kTest = 1 };

const char* to_string(Label label) noexcept;
const char* to_string(Split split) noexcept;
Label parse_label(const std::string& s);
Split parse_split(const std::string& s);

struct DatasetSeeds {
  std::uint64_t codebook = 11;
  std::uint64_t cover_model = 12;
  std::uint64_t cover = 13;
  std::uint64_t embed = 14;
  std::uint64_t split = 15;

  /// Every seed derived from one value (the CLI's --seed).
  static DatasetSeeds from_global(std::uint64_t seed);
};

struct DatasetConfig {
  std::vector<std::size_t> clip_lengths_frames;
  std::vector<double> embedding_rates;
  std::size_t n_per_class = 0;
  double alpha = 0.1;
  DatasetSeeds seeds;
  std::filesystem::path out_dir;
  CodebookSizes codebook_sizes = kDefaultCodebookSizes;
  int codebook_dim = 3;
  std::uint16_t frame_duration_ms = kDefaultFrameDurationMs;
  double train_fraction = 0.8;
};

/// Throws ConfigError on missing fields, zero counts, rates outside [0, 1].
DatasetConfig parse_dataset_config(const nlohmann::json& j);
nlohmann::json to_json(const DatasetConfig& config);
void validate_dataset_config(const DatasetConfig& config);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  Label label = Label::kCover;
  double embedding_rate = 0.0;  // 0 for covers
  std::size_t clip_len_frames = 0;
  Split split = Split::kTrain;
  double group_rate = 0.0;  // rate of the (length, rate) group the entry belongs to
};

struct ManifestFilter {
  std::optional<std::size_t> clip_len_frames;
  std::optional<double> group_rate;

  bool accepts(const ManifestEntry& e) const;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory the entry paths are relative to
  DatasetConfig config;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }
  std::vector<ManifestEntry> select(Split split, const ManifestFilter& filter = {}) const;
  QimKey qim_key() const;
};

inline constexpr const char* kManifestFileName = "manifest.json";

/// Generates every (clip length, rate) group, writes clips, sidecars and
/// `<out_dir>/manifest.json`. Byte-identical output for identical configs.
DatasetManifest build_dataset(const DatasetConfig& config);

nlohmann::json to_json(const DatasetManifest& manifest);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct Example {
  CodewordClip clip;
  Label label = Label::kCover;
  double embedding_rate = 0.0;
  std::string path;
};

std::vector<Example> load_examples(const DatasetManifest& manifest, Split split, const ManifestFilter& filter = {});

/// Bit strings in sidecars: LSB-first packed bytes, lowercase hex.
std::string bits_to_hex(const std::vector<std::uint8_t>& bits);
std::vector<std::uint8_t> hex_to_bits(const std::string& hex, std::size_t count);

/// Re-extracts every stego clip and compares with the message recorded in its
/// sidecar. Returns the paths that fail.
std::vector<std::string> audit_stego(const DatasetManifest& manifest);

}  // namespace csw
