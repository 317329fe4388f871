#pragma once

// The multi-channel convolutional sliding-window detector.
//
// Each channel k runs conv(width L_k, u1 kernels) -> BN -> ReLU ->
// conv(width w2_k, u2 kernels) -> BN -> ReLU -> per-kernel k-max over time.
// A skip path (width-1 conv of the raw frames, l_s rows) -> BN -> ReLU ->
// per-row k-max is shared by all channels. The pooled vectors are spliced into
// Z (length m), fused to O (length h), read out by a detection vector and
// squashed by a sigmoid.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "csw/codeword_stream.hpp"
#include "csw/nn.hpp"
#include "csw/rng.hpp"

namespace csw {

struct ArchConfig {
  std::vector<int> window_widths{1, 3, 5};
  int conv1_kernels = 128;
  std::vector<int> conv2_widths{3, 5, 7};
  int conv2_kernels = 64;
  int skip_rows = 64;
  int fused_dim = 64;
  int k_conv = 2;
  int k_skip = 1;
  double threshold = 0.5;

  bool skip_enabled = true;
  bool conv1_enabled = true;
  bool conv2_enabled = true;
  int extra_conv_layers = 0;  // more width-w2_k layers after conv2
  std::optional<int> pooling_k_override;  // replaces k_conv and k_skip
  bool per_channel_skip = false;
  bool fusion_relu = true;
  InputScaling input_scaling = InputScaling::kUnit;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  std::size_t n_channels() const noexcept { return window_widths.size(); }
  int conv_pool_k() const noexcept { return pooling_k_override.value_or(k_conv); }
  int skip_pool_k() const noexcept { return pooling_k_override.value_or(k_skip); }
  /// (width, kernels) of every conv layer in channel `c`, input side first.
  std::vector<std::pair<int, int>> channel_layers(std::size_t c) const;
  /// Pooled values per channel.
  std::size_t channel_features(std::size_t c) const;
  /// |Z|.
  std::size_t fused_input_dim() const;
  /// Shortest clip every path can pool.
  std::size_t min_clip_frames() const;
};

/// Throws ConfigError.
void validate_arch_config(const ArchConfig& config);
nlohmann::json to_json(const ArchConfig& config);
ArchConfig parse_arch_config(const nlohmann::json& j);

/// FNV-1a over the canonical JSON of everything that shapes the weights
/// (threshold excluded).
std::uint64_t arch_hash(const ArchConfig& config);

/// conv2 widths [3, 3, 3]: every channel pools from 10 frames.
ArchConfig short_clip_config();

/// Ablation variants 'a' (the default) to 'j', applied on top of `base`.
ArchConfig ablation_variant(char variant, const ArchConfig& base = {});
inline constexpr std::string_view kAblationVariants = "abcdefghij";
std::string describe_variant(char variant);

/// Sizes along one channel for an N-frame input.
struct ChannelShape {
  int window_width = 0;
  std::vector<nn::Index> layer_lengths;  // positions after each conv layer
  std::size_t pooled = 0;
};

struct ModelShape {
  std::vector<ChannelShape> channels;
  std::vector<std::size_t> skip_pooled;  // one entry per skip path
  std::size_t fused_input_dim = 0;
  std::size_t fused_dim = 0;
};

struct Verdict {
  double probability = 0.0;
  bool stego = false;
};

/// Stego iff y >= threshold, so an exact tie is stego.
Verdict classify(double probability, double threshold);

/// Options for a batched forward pass.
struct ForwardOptions {
  nn::Mode mode = nn::Mode::kInfer;
  double dropout = 0.0;  // train mode only, applied to Z
  Rng* rng = nullptr;    // dropout mask source
};

/// Everything backward() needs from one batched forward pass. Reusing one
/// cache across steps with the same batch layout reuses all of its buffers.
struct ForwardCache {
  // Only x_hat is kept; relu(gamma * x_hat + beta) is recomputed in backward,
  // which halves the activation memory of a 256-clip batch.
  struct Layer {
    nn::SegmentedMap x_hat;
    nn::BatchNormCache bn;
  };
  struct Path {
    std::vector<Layer> layers;
    std::vector<nn::ColumnKMax> pooled;  // per sample
  };
  nn::SegmentedMap input;
  std::vector<Path> channels;
  std::vector<Path> skips;
  nn::Matrix z;             // B x m, before dropout
  nn::Matrix dropout_scale;  // B x m, empty when dropout is off
  nn::Matrix z_used;        // what the fusion layer saw
  nn::Matrix fused;         // B x h, O
  nn::Vector logits;
  nn::Vector probabilities;
  // Activations and gradients that live only within one pass, keyed by
  // (channels, slot).
  std::map<std::pair<nn::Index, int>, nn::SegmentedMap> scratch;
};

class CswModel {
 public:
  /// Deterministic for a given seed. Throws ConfigError.
  static CswModel build(const ArchConfig& config, std::uint64_t seed);

  const ArchConfig& config() const noexcept { return config_; }
  void set_threshold(double threshold);
  std::size_t fused_input_dim() const noexcept { return fused_input_dim_; }
  std::size_t fused_dim() const noexcept { return static_cast<std::size_t>(config_.fused_dim); }
  std::size_t min_clip_frames() const noexcept { return min_frames_; }
  ModelShape shape(std::size_t n_frames) const;

  struct Output {
    double probability = 0.0;
    nn::Vector features;  // O
  };

  /// Infer-mode forward of one clip; a pure function of weights and input.
  /// Throws ClipTooShort.
  Output forward(const NormalizedClip& clip) const;
  std::vector<Output> forward_batch(std::span<const NormalizedClip* const> clips) const;
  Verdict predict(const CodewordClip& clip) const;
  Verdict predict(const CodewordClip& clip, double threshold) const;
  NormalizedClip prepare(const CodewordClip& clip) const;

  /// Batched forward that records what backward() needs. In train mode the
  /// batch statistics are used; call commit_running_stats() afterwards to fold
  /// them into the running estimates.
  ForwardCache forward_cached(std::span<const NormalizedClip* const> clips, const ForwardOptions& options) const;
  void forward_cached(std::span<const NormalizedClip* const> clips, const ForwardOptions& options,
                      ForwardCache& cache) const;
  void commit_running_stats(const ForwardCache& cache);

  /// Loss of the cached forward against `labels` (0 cover / 1 stego).
  nn::LossValue loss(const ForwardCache& cache, std::span<const double> labels, double lambda) const;
  /// Accumulates d loss / d params into the grad buffers (call zero_grad
  /// first).
  /// `cache` is only modified in its scratch buffers.
  void backward(ForwardCache& cache, std::span<const double> labels, double lambda);
  void zero_grad();
  std::vector<nn::ParamRef> parameters();

  /// Every stored tensor (parameters plus batch-norm running statistics) by
  /// name, for checkpointing.
  struct TensorRef {
    std::string name;
    double* data = nullptr;
    nn::Index rows = 0;
    nn::Index cols = 0;
  };
  std::vector<TensorRef> state();

  /// Central-difference check of every parameter on a train-mode forward
  /// without dropout.
  nn::GradCheckReport grad_check(std::span<const NormalizedClip* const> clips, std::span<const double> labels,
                                 double lambda, const nn::GradCheckOptions& options = {});

  /// Parameters and running statistics, for tests of the trivial cases.
  struct Channel {
    std::vector<nn::ConvLayerParams> convs;
    std::vector<nn::BatchNormParams> norms;
  };
  std::vector<Channel>& channels() noexcept { return channels_; }
  std::vector<Channel>& skips() noexcept { return skips_; }
  nn::DenseParams& fusion() noexcept { return fusion_; }
  nn::DenseParams& detection() noexcept { return detection_; }

 private:
  CswModel() = default;

  ArchConfig config_;
  std::vector<Channel> channels_;
  std::vector<Channel> skips_;
  nn::DenseParams fusion_;
  nn::DenseParams detection_;
  std::size_t fused_input_dim_ = 0;
  std::size_t min_frames_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::array<char, 4> kCheckpointMagic{'C', 'S', 'W', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  CswModel model;
  nlohmann::json metadata;
};

void save_checkpoint(const CswModel& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());
std::vector<std::uint8_t> encode_checkpoint(const CswModel& model,
                                            const nlohmann::json& metadata = nlohmann::json::object());

/// Throws IoError, FormatError (truncation, corruption) and ArchMismatch when
/// `expected` is given and its hash differs from the stored one.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig* expected = nullptr);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const ArchConfig* expected = nullptr);

}  // namespace csw
