#include "csw/csw_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "csw/error.hpp"

namespace csw {

using nn::Index;
using nn::Matrix;

// ---------------------------------------------------------------------------
// ArchConfig

std::vector<std::pair<int, int>> ArchConfig::channel_layers(std::size_t c) const {
  std::vector<std::pair<int, int>> layers;
  if (conv1_enabled) layers.emplace_back(window_widths.at(c), conv1_kernels);
  if (conv2_enabled) layers.emplace_back(conv2_widths.at(c), conv2_kernels);
  for (int i = 0; i < extra_conv_layers; ++i) layers.emplace_back(conv2_widths.at(c), conv2_kernels);
  return layers;
}

std::size_t ArchConfig::channel_features(std::size_t c) const {
  const auto layers = channel_layers(c);
  if (layers.empty()) return 0;
  return static_cast<std::size_t>(layers.back().second) * static_cast<std::size_t>(conv_pool_k());
}

std::size_t ArchConfig::fused_input_dim() const {
  std::size_t m = 0;
  for (std::size_t c = 0; c < n_channels(); ++c) m += channel_features(c);
  if (skip_enabled) {
    const std::size_t paths = per_channel_skip ? n_channels() : 1;
    m += paths * static_cast<std::size_t>(skip_rows) * static_cast<std::size_t>(skip_pool_k());
  }
  return m;
}

std::size_t ArchConfig::min_clip_frames() const {
  std::size_t need = 1;
  for (std::size_t c = 0; c < n_channels(); ++c) {
    std::size_t span = 0;
    for (const auto& [width, kernels] : channel_layers(c)) span += static_cast<std::size_t>(width) - 1;
    need = std::max(need, span + static_cast<std::size_t>(conv_pool_k()));
  }
  if (skip_enabled) need = std::max(need, static_cast<std::size_t>(skip_pool_k()));
  return need;
}

void validate_arch_config(const ArchConfig& c) {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::kConfig, "architecture: " + why); };
  if (c.window_widths.empty()) fail("at least one channel is required");
  if (c.conv2_widths.size() != c.window_widths.size()) fail("conv2_widths needs one entry per channel");
  for (int w : c.window_widths) {
    if (w < 1) fail("window widths must be >= 1");
  }
  for (int w : c.conv2_widths) {
    if (w < 1) fail("conv2 widths must be >= 1");
  }
  if (c.conv1_kernels < 1 || c.conv2_kernels < 1) fail("kernel counts must be >= 1");
  if (c.fused_dim < 1) fail("fused_dim must be >= 1");
  if (c.k_conv < 1 || c.k_skip < 1) fail("pooling k must be >= 1");
  if (c.pooling_k_override && *c.pooling_k_override < 1) fail("pooling_k_override must be >= 1");
  if (c.extra_conv_layers < 0) fail("extra_conv_layers must be >= 0");
  if (!c.conv1_enabled && !c.conv2_enabled && c.extra_conv_layers == 0) fail("every channel needs a conv layer");
  if (c.skip_enabled && c.skip_rows < 1) fail("skip_rows must be >= 1");
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) fail("threshold must lie in (0, 1)");
  if (!(c.bn_momentum >= 0.0 && c.bn_momentum <= 1.0)) fail("bn_momentum must lie in [0, 1]");
  if (!(c.bn_epsilon > 0.0)) fail("bn_epsilon must be positive");
}

nlohmann::json to_json(const ArchConfig& c) {
  nlohmann::json j;
  j["window_widths"] = c.window_widths;
  j["conv1_kernels"] = c.conv1_kernels;
  j["conv2_widths"] = c.conv2_widths;
  j["conv2_kernels"] = c.conv2_kernels;
  j["skip_rows"] = c.skip_rows;
  j["fused_dim"] = c.fused_dim;
  j["k_conv"] = c.k_conv;
  j["k_skip"] = c.k_skip;
  j["threshold"] = c.threshold;
  j["skip_enabled"] = c.skip_enabled;
  j["conv1_enabled"] = c.conv1_enabled;
  j["conv2_enabled"] = c.conv2_enabled;
  j["extra_conv_layers"] = c.extra_conv_layers;
  j["pooling_k_override"] = c.pooling_k_override ? nlohmann::json(*c.pooling_k_override) : nlohmann::json(nullptr);
  j["per_channel_skip"] = c.per_channel_skip;
  j["fusion_relu"] = c.fusion_relu;
  j["input_scaling"] = c.input_scaling == InputScaling::kRaw ? "raw" : "unit";
  j["bn_momentum"] = c.bn_momentum;
  j["bn_epsilon"] = c.bn_epsilon;
  j["n_channels"] = c.n_channels();
  return j;
}

ArchConfig parse_arch_config(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "architecture config must be a JSON object");
  ArchConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "window_widths") c.window_widths = value.get<std::vector<int>>();
      else if (key == "conv1_kernels") c.conv1_kernels = value.get<int>();
      else if (key == "conv2_widths") c.conv2_widths = value.get<std::vector<int>>();
      else if (key == "conv2_kernels") c.conv2_kernels = value.get<int>();
      else if (key == "skip_rows") c.skip_rows = value.get<int>();
      else if (key == "fused_dim") c.fused_dim = value.get<int>();
      else if (key == "k_conv") c.k_conv = value.get<int>();
      else if (key == "k_skip") c.k_skip = value.get<int>();
      else if (key == "threshold") c.threshold = value.get<double>();
      else if (key == "skip_enabled") c.skip_enabled = value.get<bool>();
      else if (key == "conv1_enabled") c.conv1_enabled = value.get<bool>();
      else if (key == "conv2_enabled") c.conv2_enabled = value.get<bool>();
      else if (key == "extra_conv_layers") c.extra_conv_layers = value.get<int>();
      else if (key == "pooling_k_override") {
        if (value.is_null()) c.pooling_k_override.reset();
        else c.pooling_k_override = value.get<int>();
      } else if (key == "per_channel_skip") c.per_channel_skip = value.get<bool>();
      else if (key == "fusion_relu") c.fusion_relu = value.get<bool>();
      else if (key == "input_scaling") {
        const auto s = value.get<std::string>();
        if (s == "unit") c.input_scaling = InputScaling::kUnit;
        else if (s == "raw") c.input_scaling = InputScaling::kRaw;
        else throw Error(ErrorCode::kConfig, "input_scaling must be \"unit\" or \"raw\"");
      } else if (key == "bn_momentum") c.bn_momentum = value.get<double>();
      else if (key == "bn_epsilon") c.bn_epsilon = value.get<double>();
      else if (key == "n_channels") continue;  // applied below, after the widths
      else throw Error(ErrorCode::kConfig, "unknown architecture field \"" + key + "\"");
    }
    if (j.contains("n_channels")) {
      const auto n = j.at("n_channels").get<std::size_t>();
      if (n == 0) throw Error(ErrorCode::kConfig, "n_channels must be >= 1");
      if (n > c.window_widths.size() || n > c.conv2_widths.size()) {
        throw Error(ErrorCode::kConfig, "n_channels exceeds the number of window widths");
      }
      c.window_widths.resize(n);
      c.conv2_widths.resize(n);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("architecture config: ") + e.what());
  }
  validate_arch_config(c);
  return c;
}

std::uint64_t arch_hash(const ArchConfig& config) {
  auto j = to_json(config);
  j.erase("threshold");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ArchConfig short_clip_config() {
  ArchConfig c;
  c.conv2_widths = {3, 3, 3};
  return c;
}

ArchConfig ablation_variant(char variant, const ArchConfig& base) {
  ArchConfig c = base;
  switch (variant) {
    case 'a':
      break;
    case 'b':
      c.skip_enabled = false;
      break;
    case 'c':
      c.k_conv = 1;
      c.k_skip = 1;
      break;
    case 'd':
      c.pooling_k_override = 2;
      break;
    case 'e':
      c.pooling_k_override = 3;
      break;
    case 'f':
      c.conv1_enabled = false;
      break;
    case 'g':
      c.conv2_enabled = false;
      break;
    case 'h':
      c.extra_conv_layers = 1;
      break;
    case 'i':
      c.extra_conv_layers = 2;
      break;
    case 'j':
      c.window_widths.resize(std::min<std::size_t>(2, c.window_widths.size()));
      c.conv2_widths.resize(c.window_widths.size());
      break;
    default:
      throw Error(ErrorCode::kConfig, std::string("unknown ablation variant '") + variant + "'");
  }
  validate_arch_config(c);
  return c;
}

std::string describe_variant(char variant) {
  switch (variant) {
    case 'a': return "full model";
    case 'b': return "no skip connection";
    case 'c': return "1-max pooling everywhere";
    case 'd': return "2-max pooling everywhere";
    case 'e': return "3-max pooling everywhere";
    case 'f': return "first conv layer removed";
    case 'g': return "second conv layer removed";
    case 'h': return "three conv layers";
    case 'i': return "four conv layers";
    case 'j': return "two channels";
    default: throw Error(ErrorCode::kConfig, std::string("unknown ablation variant '") + variant + "'");
  }
}

Verdict classify(double probability, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error(ErrorCode::kInvalidArgument, "threshold must lie in (0, 1)");
  return {probability, probability >= threshold};
}

// ---------------------------------------------------------------------------
// Construction

CswModel CswModel::build(const ArchConfig& config, std::uint64_t seed) {
  validate_arch_config(config);
  CswModel model;
  model.config_ = config;
  Rng rng(derive_seed(seed, 0xC5A1u));

  auto make_path = [&](const std::vector<std::pair<int, int>>& layers) {
    Channel ch;
    int in = kSlots;
    for (const auto& [width, kernels] : layers) {
      ch.convs.push_back(nn::make_conv(in, width, kernels, rng));
      ch.norms.push_back(nn::make_batch_norm(kernels, config.bn_momentum, config.bn_epsilon));
      in = kernels;
    }
    return ch;
  };
  for (std::size_t c = 0; c < config.n_channels(); ++c) model.channels_.push_back(make_path(config.channel_layers(c)));
  if (config.skip_enabled) {
    const std::size_t paths = config.per_channel_skip ? config.n_channels() : 1;
    for (std::size_t s = 0; s < paths; ++s) model.skips_.push_back(make_path({{1, config.skip_rows}}));
  }
  model.fused_input_dim_ = config.fused_input_dim();
  model.min_frames_ = config.min_clip_frames();
  model.fusion_ = nn::make_dense(static_cast<Index>(model.fused_input_dim_), config.fused_dim, rng);
  model.detection_ = nn::make_dense(config.fused_dim, 1, rng);
  return model;
}

void CswModel::set_threshold(double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error(ErrorCode::kInvalidArgument, "threshold must lie in (0, 1)");
  config_.threshold = threshold;
}

ModelShape CswModel::shape(std::size_t n_frames) const {
  ModelShape s;
  const auto n = static_cast<Index>(n_frames);
  std::size_t m = 0;
  for (std::size_t c = 0; c < channels_.size(); ++c) {
    ChannelShape cs;
    cs.window_width = config_.window_widths[c];
    Index len = n;
    for (const auto& conv : channels_[c].convs) {
      len = conv.output_length(len);
      cs.layer_lengths.push_back(len);
    }
    cs.pooled = static_cast<std::size_t>(channels_[c].convs.back().kernels) *
                static_cast<std::size_t>(config_.conv_pool_k());
    m += cs.pooled;
    s.channels.push_back(std::move(cs));
  }
  for (const auto& sk : skips_) {
    s.skip_pooled.push_back(static_cast<std::size_t>(sk.convs.back().kernels) *
                            static_cast<std::size_t>(config_.skip_pool_k()));
    m += s.skip_pooled.back();
  }
  s.fused_input_dim = m;
  s.fused_dim = static_cast<std::size_t>(config_.fused_dim);
  if (m != fused_input_dim_) throw Error(ErrorCode::kInternal, "spliced width disagrees with the fusion layer");
  return s;
}

NormalizedClip CswModel::prepare(const CodewordClip& clip) const { return normalize(clip, config_.input_scaling); }

// ---------------------------------------------------------------------------
// Forward

namespace {

// A fresh activated map with the scratch rows zeroed, for hashing.
nn::SegmentedMap activate(const nn::SegmentedMap& x_hat, const nn::BatchNormParams& norm) {
  nn::SegmentedMap out;
  out.data.setZero(x_hat.data.rows(), x_hat.data.cols());
  nn::scale_shift_relu(x_hat, norm, out);
  return out;
}

nn::SegmentedMap& scratch(ForwardCache& cache, Index cols, int slot) { return cache.scratch[{cols, slot}]; }

// Scratch slots: 0 and 1 alternate for gradients, 2 holds activations.
constexpr int kActivationSlot = 2;

// Runs one conv stack and pools every sample into its slice of z.
void run_path(const CswModel::Channel& path, const nn::SegmentedMap& input, nn::Mode mode, int k, Matrix& z,
              Index column, ForwardCache::Path& out, ForwardCache& cache) {
  out.layers.resize(path.convs.size());
  const nn::SegmentedMap* x = &input;
  for (std::size_t l = 0; l < path.convs.size(); ++l) {
    auto& layer = out.layers[l];
    nn::conv_forward(*x, path.convs[l], layer.x_hat);
    nn::batch_norm_normalize(layer.x_hat, path.norms[l], mode, layer.bn);
    auto& act = scratch(cache, layer.x_hat.data.cols(), kActivationSlot);
    nn::scale_shift_relu(layer.x_hat, path.norms[l], act);
    x = &act;
  }
  const auto kk = static_cast<std::size_t>(k);
  out.pooled.resize(x->segments());
  for (std::size_t i = 0; i < x->segments(); ++i) {
    nn::kmax_pool_columns(x->segment(i), kk, out.pooled[i]);
    const auto& v = out.pooled[i].values;
    z.row(static_cast<Index>(i)).segment(column, static_cast<Index>(v.size())) =
        Eigen::Map<const nn::RowVector>(v.data(), static_cast<Index>(v.size()));
  }
}

struct RegimeHash {
  std::uint64_t value = 0xcbf29ce484222325ULL;

  void add(std::uint64_t v) {
    value ^= v;
    value *= 0x100000001b3ULL;
  }
  void add_signs(const Matrix& m) {
    std::uint64_t word = 0;
    for (Index i = 0; i < m.size(); ++i) {
      word = (word << 1) | (m.data()[i] > 0.0 ? 1u : 0u);
      if (i % 64 == 63) add(word);
    }
    add(word);
  }
  void add_positions(const std::vector<Index>& positions) {
    for (auto p : positions) add(static_cast<std::uint64_t>(p));
  }
};

// Z -> O -> logit -> probability.
void run_head(const Matrix& z, const nn::DenseParams& fusion, const nn::DenseParams& detection, bool relu,
              ForwardCache& cache) {
  cache.fused.noalias() = z * fusion.weight;
  cache.fused.rowwise() += fusion.bias;
  if (relu) cache.fused = cache.fused.cwiseMax(0.0);
  cache.logits = cache.fused * detection.weight.col(0);
  cache.logits.array() += detection.bias(0);
  cache.probabilities = cache.logits.unaryExpr([](double v) { return nn::sigmoid(v); });
}

}  // namespace

ForwardCache CswModel::forward_cached(std::span<const NormalizedClip* const> clips,
                                      const ForwardOptions& options) const {
  ForwardCache cache;
  forward_cached(clips, options, cache);
  return cache;
}

void CswModel::forward_cached(std::span<const NormalizedClip* const> clips, const ForwardOptions& options,
                              ForwardCache& cache) const {
  if (clips.empty()) throw Error(ErrorCode::kInvalidArgument, "forward needs at least one clip");
  cache.input.offsets.assign(1, 0);
  cache.input.lengths.clear();
  for (const NormalizedClip* clip : clips) {
    const auto n = static_cast<std::size_t>(clip->frames());
    if (n < min_frames_) throw ClipTooShort(n, min_frames_);
    cache.input.offsets.push_back(cache.input.offsets.back() + clip->frames());
  }
  cache.input.data.resize(cache.input.offsets.back(), kSlots);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    // The 3 x N column-major matrix is laid out exactly like an N x 3
    // row-major one.
    cache.input.segment(i) = Eigen::Map<const Matrix>(clips[i]->matrix.data(), clips[i]->frames(), kSlots);
  }

  const auto batch = static_cast<Index>(clips.size());
  cache.z.resize(batch, static_cast<Index>(fused_input_dim_));
  cache.channels.resize(channels_.size());
  cache.skips.resize(skips_.size());
  Index column = 0;
  for (std::size_t c = 0; c < channels_.size(); ++c) {
    run_path(channels_[c], cache.input, options.mode, config_.conv_pool_k(), cache.z, column, cache.channels[c],
             cache);
    column += channels_[c].convs.back().kernels * config_.conv_pool_k();
  }
  for (std::size_t s = 0; s < skips_.size(); ++s) {
    run_path(skips_[s], cache.input, options.mode, config_.skip_pool_k(), cache.z, column, cache.skips[s], cache);
    column += skips_[s].convs.back().kernels * config_.skip_pool_k();
  }
  if (column != static_cast<Index>(fused_input_dim_)) {
    throw Error(ErrorCode::kInternal, "spliced width disagrees with the fusion layer");
  }

  if (options.mode == nn::Mode::kTrain && options.dropout > 0.0) {
    if (options.dropout >= 1.0) throw Error(ErrorCode::kConfig, "dropout rate must lie in [0, 1)");
    if (!options.rng) throw Error(ErrorCode::kInvalidArgument, "dropout needs a random source");
    const double keep = 1.0 - options.dropout;
    cache.dropout_scale.resize(cache.z.rows(), cache.z.cols());
    for (Index i = 0; i < cache.dropout_scale.size(); ++i) {
      cache.dropout_scale.data()[i] = uniform01(*options.rng) < keep ? 1.0 / keep : 0.0;
    }
    cache.z_used = cache.z.cwiseProduct(cache.dropout_scale);
  } else {
    if (options.dropout < 0.0 || options.dropout >= 1.0) {
      throw Error(ErrorCode::kConfig, "dropout rate must lie in [0, 1)");
    }
    cache.dropout_scale.resize(0, 0);
    cache.z_used = cache.z;
  }

  run_head(cache.z_used, fusion_, detection_, config_.fusion_relu, cache);
}

void CswModel::commit_running_stats(const ForwardCache& cache) {
  auto commit = [](std::vector<Channel>& paths, const std::vector<ForwardCache::Path>& cached) {
    for (std::size_t p = 0; p < paths.size() && p < cached.size(); ++p) {
      for (std::size_t l = 0; l < paths[p].norms.size(); ++l) {
        nn::update_running_stats(paths[p].norms[l], cached[p].layers[l].bn);
      }
    }
  };
  commit(channels_, cache.channels);
  commit(skips_, cache.skips);
}

CswModel::Output CswModel::forward(const NormalizedClip& clip) const {
  // Reused per thread: long clips need megabyte buffers, and fresh ones come
  // back from the allocator as untouched pages on every call.
  thread_local ForwardCache cache;
  const NormalizedClip* one[] = {&clip};
  forward_cached(one, {}, cache);
  return {cache.probabilities(0), cache.fused.row(0).transpose()};
}

std::vector<CswModel::Output> CswModel::forward_batch(std::span<const NormalizedClip* const> clips) const {
  auto cache = forward_cached(clips, {});
  std::vector<Output> out;
  out.reserve(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    out.push_back({cache.probabilities(static_cast<Index>(i)), cache.fused.row(static_cast<Index>(i)).transpose()});
  }
  return out;
}

Verdict CswModel::predict(const CodewordClip& clip) const { return predict(clip, config_.threshold); }

Verdict CswModel::predict(const CodewordClip& clip, double threshold) const {
  return classify(forward(prepare(clip)).probability, threshold);
}

// ---------------------------------------------------------------------------
// Loss and backward

nn::LossValue CswModel::loss(const ForwardCache& cache, std::span<const double> labels, double lambda) const {
  const Matrix* regularized[] = {&fusion_.weight, &detection_.weight};
  return nn::bce_l2_loss(std::span<const double>(cache.probabilities.data(), static_cast<std::size_t>(cache.probabilities.size())),
                         labels, regularized, lambda);
}

namespace {

void backward_path(CswModel::Channel& path, const ForwardCache::Path& pc, ForwardCache& cache, const Matrix& dz,
                   Index column, int k) {
  const std::size_t depth = path.convs.size();
  // Scatter dZ back onto the pooled positions of the last map.
  const auto& last = pc.layers.back().x_hat;
  int slot = 0;
  nn::SegmentedMap* grad = &scratch(cache, last.data.cols(), slot);
  grad->offsets = last.offsets;
  grad->lengths = last.lengths;
  grad->data.setZero(last.data.rows(), last.data.cols());
  const Index channels = last.data.cols();
  for (std::size_t i = 0; i < pc.pooled.size(); ++i) {
    const auto& pos = pc.pooled[i].positions;
    const Index base = last.offsets[i];
    for (Index c = 0; c < channels; ++c) {
      for (int t = 0; t < k; ++t) {
        const Index j = c * k + t;
        grad->data(base + pos[static_cast<std::size_t>(j)], c) += dz(static_cast<Index>(i), column + j);
      }
    }
  }

  for (std::size_t l = depth; l-- > 0;) {
    nn::scale_shift_relu_batch_norm_backward(pc.layers[l].x_hat, path.norms[l], pc.layers[l].bn, *grad);
    if (l == 0) {
      nn::conv_backward(cache.input, *grad, path.convs[0], nullptr);
      break;
    }
    const auto& below_hat = pc.layers[l - 1].x_hat;
    auto& below = scratch(cache, below_hat.data.cols(), kActivationSlot);
    nn::scale_shift_relu(below_hat, path.norms[l - 1], below);
    slot = 1 - slot;
    nn::SegmentedMap* grad_below = &scratch(cache, below_hat.data.cols(), slot);
    nn::conv_backward(below, *grad, path.convs[l], grad_below);
    grad = grad_below;
  }
}

}  // namespace

void CswModel::backward(ForwardCache& cache, std::span<const double> labels, double lambda) {
  const Index batch = cache.probabilities.size();
  if (static_cast<Index>(labels.size()) != batch) throw Error(ErrorCode::kShapeMismatch, "one label per clip");
  // d loss / d logit for sigmoid + mean cross-entropy.
  nn::Vector dlogit(batch);
  for (Index i = 0; i < batch; ++i) {
    dlogit(i) = (cache.probabilities(i) - labels[static_cast<std::size_t>(i)]) / static_cast<double>(batch);
  }
  detection_.grad_weight.col(0).noalias() += cache.fused.transpose() * dlogit;
  detection_.grad_bias(0) += dlogit.sum();

  Matrix dfused = dlogit * detection_.weight.col(0).transpose();
  if (config_.fusion_relu) dfused.array() *= (cache.fused.array() > 0.0).cast<double>();
  fusion_.grad_weight.noalias() += cache.z_used.transpose() * dfused;
  fusion_.grad_bias += dfused.colwise().sum();
  Matrix dz = dfused * fusion_.weight.transpose();
  if (cache.dropout_scale.size() > 0) dz.array() *= cache.dropout_scale.array();

  nn::add_l2_norm_gradient(fusion_.weight, lambda, fusion_.grad_weight);
  nn::add_l2_norm_gradient(detection_.weight, lambda, detection_.grad_weight);

  Index column = 0;
  for (std::size_t c = 0; c < channels_.size(); ++c) {
    backward_path(channels_[c], cache.channels[c], cache, dz, column, config_.conv_pool_k());
    column += channels_[c].convs.back().kernels * config_.conv_pool_k();
  }
  for (std::size_t s = 0; s < skips_.size(); ++s) {
    backward_path(skips_[s], cache.skips[s], cache, dz, column, config_.skip_pool_k());
    column += skips_[s].convs.back().kernels * config_.skip_pool_k();
  }
}

void CswModel::zero_grad() {
  for (auto* paths : {&channels_, &skips_}) {
    for (auto& p : *paths) {
      for (auto& c : p.convs) c.zero_grad();
      for (auto& n : p.norms) n.zero_grad();
    }
  }
  fusion_.zero_grad();
  detection_.zero_grad();
}

std::vector<nn::ParamRef> CswModel::parameters() {
  std::vector<nn::ParamRef> out;
  auto add_paths = [&](std::vector<Channel>& paths, const std::string& prefix) {
    for (std::size_t p = 0; p < paths.size(); ++p) {
      for (std::size_t l = 0; l < paths[p].convs.size(); ++l) {
        const std::string name = prefix + std::to_string(p) + ".layer" + std::to_string(l);
        paths[p].convs[l].append_params(name + ".conv", out);
        paths[p].norms[l].append_params(name + ".bn", out);
      }
    }
  };
  add_paths(channels_, "channel");
  add_paths(skips_, "skip");
  fusion_.append_params("fusion", out);
  detection_.append_params("detection", out);
  return out;
}

std::vector<CswModel::TensorRef> CswModel::state() {
  std::vector<TensorRef> out;
  auto add = [&](std::string name, auto& m) { out.push_back({std::move(name), m.data(), m.rows(), m.cols()}); };
  auto add_paths = [&](std::vector<Channel>& paths, const std::string& prefix) {
    for (std::size_t p = 0; p < paths.size(); ++p) {
      for (std::size_t l = 0; l < paths[p].convs.size(); ++l) {
        const std::string name = prefix + std::to_string(p) + ".layer" + std::to_string(l);
        add(name + ".conv.weight", paths[p].convs[l].weight);
        add(name + ".conv.bias", paths[p].convs[l].bias);
        auto& bn = paths[p].norms[l];
        add(name + ".bn.gamma", bn.gamma);
        add(name + ".bn.beta", bn.beta);
        add(name + ".bn.running_mean", bn.running_mean);
        add(name + ".bn.running_var", bn.running_var);
      }
    }
  };
  add_paths(channels_, "channel");
  add_paths(skips_, "skip");
  add("fusion.weight", fusion_.weight);
  add("fusion.bias", fusion_.bias);
  add("detection.weight", detection_.weight);
  add("detection.bias", detection_.bias);
  return out;
}

nn::GradCheckReport CswModel::grad_check(std::span<const NormalizedClip* const> clips, std::span<const double> labels,
                                         double lambda, const nn::GradCheckOptions& options) {
  ForwardOptions fo;
  fo.mode = nn::Mode::kTrain;
  ForwardCache base = forward_cached(clips, fo);

  // A perturbed entry only moves the part of Z its path produces, and an entry
  // of the last conv layer of a path only moves its own kernel's pooled values
  // (batch norm, ReLU and pooling are per kernel). Recomputing just that part
  // keeps a full check of ~156k parameters inside a couple of minutes; the
  // difference quotient is still taken on the complete loss.
  struct Owner {
    std::vector<Channel>* paths = nullptr;  // null for the dense head
    std::size_t path = 0;
    std::size_t layer = 0;
    bool weight = false;
  };
  struct PathInfo {
    const ForwardCache::Path* cache;
    Index column;
    int k;
    nn::SegmentedMap last_input;
  };
  std::vector<Owner> owners;
  std::vector<std::vector<PathInfo>> info(2);
  Index column = 0;
  for (int kind = 0; kind < 2; ++kind) {
    auto& paths = kind == 0 ? channels_ : skips_;
    const auto& cached = kind == 0 ? base.channels : base.skips;
    const int k = kind == 0 ? config_.conv_pool_k() : config_.skip_pool_k();
    for (std::size_t p = 0; p < paths.size(); ++p) {
      const std::size_t depth = paths[p].convs.size();
      for (std::size_t l = 0; l < depth; ++l) {
        owners.push_back({&paths, p, l, true});
        for (int extra = 0; extra < 3; ++extra) owners.push_back({&paths, p, l, false});
      }
      info[static_cast<std::size_t>(kind)].push_back(
          {&cached[p], column, k,
           depth == 1 ? base.input : activate(cached[p].layers[depth - 2].x_hat, paths[p].norms[depth - 2])});
      column += paths[p].convs.back().kernels * k;
    }
  }
  for (int i = 0; i < 4; ++i) owners.push_back({});

  // The regime hash identifies the smooth piece a probe lands in: every ReLU
  // sign and k-max selection that the perturbed entry can influence.
  auto head_loss = [&](const Matrix& z, RegimeHash regime) {
    ForwardCache c;
    run_head(z, fusion_, detection_, config_.fusion_relu, c);
    regime.add_signs(c.fused);
    const Matrix* regularized[] = {&fusion_.weight, &detection_.weight};
    const double value =
        nn::bce_l2_loss(
            std::span<const double>(c.probabilities.data(), static_cast<std::size_t>(c.probabilities.size())),
            labels, regularized, lambda)
            .total;
    return nn::LossProbe{value, regime.value};
  };

  Matrix z;
  ForwardCache probe;
  ForwardCache::Path probe_path;
  auto local_loss = [&](std::size_t tensor, std::size_t element) {
    const Owner& o = owners.at(tensor);
    RegimeHash regime;
    if (!o.paths) return head_loss(base.z, regime);
    const auto& path = (*o.paths)[o.path];
    const auto& pi = info[o.paths == &channels_ ? 0 : 1][o.path];
    z = base.z;
    if (o.layer + 1 < path.convs.size()) {
      run_path(path, base.input, nn::Mode::kTrain, pi.k, z, pi.column, probe_path, probe);
      for (std::size_t l = 0; l < probe_path.layers.size(); ++l) {
        regime.add_signs(activate(probe_path.layers[l].x_hat, path.norms[l]).data);
      }
      for (const auto& pooled : probe_path.pooled) regime.add_positions(pooled.positions);
      return head_loss(z, regime);
    }
    const auto& conv = path.convs[o.layer];
    const auto q = static_cast<Index>(o.weight ? element % static_cast<std::size_t>(conv.kernels) : element);
    nn::ConvLayerParams one;
    one.in_channels = conv.in_channels;
    one.width = conv.width;
    one.stride = conv.stride;
    one.kernels = 1;
    one.weight = conv.weight.col(q);
    one.bias = conv.bias.segment(q, 1);
    const auto& full = path.norms[o.layer];
    nn::BatchNormParams norm;
    norm.epsilon = full.epsilon;
    norm.gamma = full.gamma.segment(q, 1);
    norm.beta = full.beta.segment(q, 1);
    nn::SegmentedMap x_hat = nn::conv_forward(pi.last_input, one);
    nn::BatchNormCache bn;
    nn::batch_norm_normalize(x_hat, norm, nn::Mode::kTrain, bn);
    const nn::SegmentedMap act = activate(x_hat, norm);
    regime.add_signs(act.data);
    nn::ColumnKMax pooled;
    for (std::size_t i = 0; i < act.segments(); ++i) {
      nn::kmax_pool_columns(act.segment(i), static_cast<std::size_t>(pi.k), pooled);
      regime.add_positions(pooled.positions);
      for (int t = 0; t < pi.k; ++t) {
        z(static_cast<Index>(i), pi.column + q * pi.k + t) = pooled.values[static_cast<std::size_t>(t)];
      }
    }
    return head_loss(z, regime);
  };
  auto grad_fn = [&] {
    zero_grad();
    backward(base, labels, lambda);
  };
  const auto params = parameters();
  if (owners.size() != params.size()) throw Error(ErrorCode::kInternal, "grad_check parameter bookkeeping is off");
  return nn::grad_check(local_loss, grad_fn, params, options);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian):
//   "CSWM" | u32 version | u64 arch hash | u32 len + arch JSON |
//   u32 len + metadata JSON | u32 tensor count |
//   per tensor: u16 name len + name | u32 rows | u32 cols | rows*cols f64 |
//   u64 FNV-1a of every preceding byte

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    if constexpr (std::is_same_v<T, double>) {
      put(std::bit_cast<std::uint64_t>(v));
    } else {
      for (std::size_t i = 0; i < sizeof(T); ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  void put_bytes(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get(const char* what) {
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(get<std::uint64_t>(what));
    } else {
      need(sizeof(T), what);
      T v = 0;
      for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
      pos_ += sizeof(T);
      return v;
    }
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(bytes_.size(), std::string("checkpoint truncated in ") + what);
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CswModel& model, const nlohmann::json& metadata) {
  Writer w;
  w.put_bytes(std::string(kCheckpointMagic.begin(), kCheckpointMagic.end()));
  w.put(kCheckpointVersion);
  w.put(arch_hash(model.config()));
  const std::string arch = to_json(model.config()).dump();
  w.put(static_cast<std::uint32_t>(arch.size()));
  w.put_bytes(arch);
  const std::string meta = metadata.dump();
  w.put(static_cast<std::uint32_t>(meta.size()));
  w.put_bytes(meta);
  // state() only hands out pointers; nothing is written through them here.
  const auto tensors = const_cast<CswModel&>(model).state();
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.put(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name);
    w.put(static_cast<std::uint32_t>(t.rows));
    w.put(static_cast<std::uint32_t>(t.cols));
    for (Index i = 0; i < t.rows * t.cols; ++i) w.put(t.data[i]);
  }
  w.put(fnv1a(w.bytes));
  return std::move(w.bytes);
}

void save_checkpoint(const CswModel& model, const std::filesystem::path& path, const nlohmann::json& metadata) {
  const auto bytes = encode_checkpoint(model, metadata);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const ArchConfig* expected) {
  Reader r(bytes);
  const std::string magic = r.get_string(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) throw FormatError(0, "not a checkpoint");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch, "checkpoint version " + std::to_string(version) + " is not supported");
  }
  const auto stored_hash = r.get<std::uint64_t>("architecture hash");
  const auto arch_len = r.get<std::uint32_t>("architecture length");
  const std::size_t arch_at = r.pos();
  const std::string arch_text = r.get_string(arch_len, "architecture");
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  const std::size_t meta_at = r.pos();
  const std::string meta_text = r.get_string(meta_len, "metadata");

  // Verify the trailer before trusting anything else in the body.
  if (bytes.size() < r.pos() + 8) throw FormatError(bytes.size(), "checkpoint truncated before the checksum");
  const std::size_t body = bytes.size() - 8;
  Reader tail(bytes.subspan(body));
  if (tail.get<std::uint64_t>("checksum") != fnv1a(bytes.first(body))) {
    throw FormatError(body, "checkpoint checksum mismatch (truncated or corrupt)");
  }

  ArchConfig arch;
  try {
    arch = parse_arch_config(nlohmann::json::parse(arch_text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(arch_at, std::string("bad architecture JSON: ") + e.what());
  }
  if (arch_hash(arch) != stored_hash) throw FormatError(arch_at, "architecture does not match its stored hash");
  if (expected && arch_hash(*expected) != stored_hash) {
    throw Error(ErrorCode::kArchMismatch, "checkpoint architecture differs from the requested configuration");
  }
  nlohmann::json metadata;
  try {
    metadata = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_at, std::string("bad metadata JSON: ") + e.what());
  }

  CswModel model = CswModel::build(arch, 0);
  auto tensors = model.state();
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != tensors.size()) throw FormatError(r.pos(), "tensor count does not match the architecture");
  for (auto& t : tensors) {
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    const std::size_t at = r.pos();
    const std::string name = r.get_string(name_len, "tensor name");
    if (name != t.name) throw FormatError(at, "expected tensor " + t.name + ", found " + name);
    const auto rows = r.get<std::uint32_t>("tensor rows");
    const auto cols = r.get<std::uint32_t>("tensor cols");
    if (rows != t.rows || cols != t.cols) throw FormatError(at, "tensor " + name + " has the wrong shape");
    for (Index i = 0; i < t.rows * t.cols; ++i) t.data[i] = r.get<double>("tensor data");
  }
  if (r.pos() != body) throw FormatError(r.pos(), "unexpected bytes after the last tensor");
  return {std::move(model), std::move(metadata)};
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, expected);
}

}  // namespace csw
