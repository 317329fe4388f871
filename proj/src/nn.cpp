#include "csw/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "csw/error.hpp"

namespace csw::nn {
namespace {

// im2col without copying: in a position-major map, the receptive field of
// output position p is the contiguous run of width * channels values starting
// at row p * stride. Consecutive rows of the view overlap in memory.
using StridedView = Eigen::Map<const Matrix, 0, Eigen::OuterStride<>>;

StridedView im2col(const double* data, Index out_len, const ConvLayerParams& p) {
  return StridedView(data, out_len, static_cast<Index>(p.width) * p.in_channels,
                     Eigen::OuterStride<>(static_cast<Index>(p.stride) * p.in_channels));
}

void check_conv_input(Index rows, Index cols, const ConvLayerParams& p) {
  if (cols != p.in_channels) {
    throw Error(ErrorCode::kShapeMismatch, "conv input has " + std::to_string(cols) + " channels, kernel expects " +
                                               std::to_string(p.in_channels));
  }
  if (rows < p.width) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv input has " + std::to_string(rows) + " positions, kernel width is " + std::to_string(p.width));
  }
}

// grad_input(p * stride + s, :) += G(p, s * C : (s + 1) * C)
template <typename Out>
void col2im_add(const Matrix& cols, const ConvLayerParams& p, Out&& grad_input) {
  const Index c = p.in_channels;
  const Index len = cols.rows();
  if (p.stride == 1) {
    for (int s = 0; s < p.width; ++s) grad_input.middleRows(s, len) += cols.middleCols(s * c, c);
    return;
  }
  for (Index q = 0; q < len; ++q) {
    for (int s = 0; s < p.width; ++s) grad_input.row(q * p.stride + s) += cols.row(q).segment(s * c, c);
  }
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)). The He bound sqrt(6/fan_in) is too hot
// for the fusion layer: its inputs are maxima of post-ReLU maps (all positive,
// around 3), and initial logits land near +-5.
double init_limit(Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1))); }

void fill_uniform(Matrix& m, double limit, Rng& rng) {
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * uniform01(rng) - 1.0) * limit;
}

void push_param(std::vector<ParamRef>& out, std::string name, double* value, double* grad, Index size) {
  out.push_back({std::move(name), value, grad, static_cast<std::size_t>(size)});
}

}  // namespace

// ---------------------------------------------------------------------------

Index ConvLayerParams::output_length(Index positions) const {
  if (positions < width) return 0;
  return (positions - width) / stride + 1;
}

void ConvLayerParams::zero_grad() {
  grad_weight.setZero(weight.rows(), weight.cols());
  grad_bias.setZero(bias.size());
}

void ConvLayerParams::append_params(const std::string& prefix, std::vector<ParamRef>& out) {
  if (grad_weight.size() != weight.size()) zero_grad();
  push_param(out, prefix + ".weight", weight.data(), grad_weight.data(), weight.size());
  push_param(out, prefix + ".bias", bias.data(), grad_bias.data(), bias.size());
}

ConvLayerParams make_conv(int in_channels, int width, int kernels, Rng& rng, int stride) {
  if (in_channels < 1 || width < 1 || kernels < 1 || stride < 1) {
    throw Error(ErrorCode::kConfig, "convolution dimensions must be positive");
  }
  ConvLayerParams p;
  p.in_channels = in_channels;
  p.width = width;
  p.kernels = kernels;
  p.stride = stride;
  p.weight.resize(static_cast<Index>(width) * in_channels, kernels);
  fill_uniform(p.weight, init_limit(p.weight.rows()), rng);
  p.bias.setZero(kernels);
  p.zero_grad();
  return p;
}

Tensor2 conv_valid(const Tensor2& input, const ConvLayerParams& params) {
  check_conv_input(input.rows(), input.cols(), params);
  const Index len = params.output_length(input.rows());
  Tensor2 out(len, params.kernels);
  out.noalias() = im2col(input.data(), len, params) * params.weight;
  out.rowwise() += params.bias;
  return out;
}

void conv_backward(const Tensor2& input, const Tensor2& grad_output, ConvLayerParams& params, Tensor2* grad_input) {
  check_conv_input(input.rows(), input.cols(), params);
  const Index len = params.output_length(input.rows());
  if (grad_output.rows() != len || grad_output.cols() != params.kernels) {
    throw Error(ErrorCode::kShapeMismatch, "conv output gradient has the wrong shape");
  }
  if (params.grad_weight.size() != params.weight.size()) params.zero_grad();
  params.grad_weight.noalias() += im2col(input.data(), len, params).transpose() * grad_output;
  params.grad_bias += grad_output.colwise().sum();
  if (grad_input) {
    grad_input->setZero(input.rows(), input.cols());
    const Matrix cols = grad_output * params.weight.transpose();
    col2im_add(cols, params, *grad_input);
  }
}

Index SegmentedMap::valid_rows() const {
  Index total = 0;
  for (std::size_t i = 0; i < segments(); ++i) total += rows_of(i);
  return total;
}

void conv_forward(const SegmentedMap& input, const ConvLayerParams& params, SegmentedMap& out) {
  const std::size_t n = input.segments();
  out.offsets = input.offsets;
  out.lengths.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    check_conv_input(input.rows_of(i), input.data.cols(), params);
    out.lengths[i] = params.output_length(input.rows_of(i));
  }
  out.data.resize(input.data.rows(), params.kernels);
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = input.data.data() + input.offsets[i] * input.data.cols();
    auto seg = out.segment(i);
    seg.noalias() = im2col(src, seg.rows(), params) * params.weight;
    seg.rowwise() += params.bias;
  }
}

SegmentedMap conv_forward(const SegmentedMap& input, const ConvLayerParams& params) {
  SegmentedMap out;
  conv_forward(input, params, out);
  return out;
}

void conv_backward(const SegmentedMap& input, const SegmentedMap& grad_output, ConvLayerParams& params,
                   SegmentedMap* grad_input) {
  if (grad_output.segments() != input.segments() || grad_output.data.cols() != params.kernels) {
    throw Error(ErrorCode::kShapeMismatch, "conv output gradient has the wrong shape");
  }
  if (params.grad_weight.size() != params.weight.size()) params.zero_grad();
  const Index c = params.in_channels;
  if (grad_input) {
    grad_input->offsets = input.offsets;
    grad_input->lengths.resize(input.segments());
    for (std::size_t i = 0; i < input.segments(); ++i) grad_input->lengths[i] = input.rows_of(i);
    grad_input->data.resize(input.data.rows(), input.data.cols());
  }
  Matrix cols;
  for (std::size_t i = 0; i < input.segments(); ++i) {
    const Index len = grad_output.rows_of(i);
    if (input.data.cols() != c || len != params.output_length(input.rows_of(i))) {
      throw Error(ErrorCode::kShapeMismatch, "conv output gradient segment has the wrong length");
    }
    const double* src = input.data.data() + input.offsets[i] * c;
    const auto g = grad_output.segment(i);
    params.grad_weight.noalias() += im2col(src, len, params).transpose() * g;
    for (Index r = 0; r < len; ++r) params.grad_bias += g.row(r);
    if (!grad_input) continue;
    auto gi = grad_input->segment(i);
    if (params.stride == 1) {
      // One GEMM per tap straight into the shifted rows; tap 0 initializes.
      gi.topRows(len).noalias() = g * params.weight.topRows(c).transpose();
      gi.bottomRows(gi.rows() - len).setZero();
      for (int s = 1; s < params.width; ++s) {
        gi.middleRows(s, len).noalias() += g * params.weight.middleRows(s * c, c).transpose();
      }
    } else {
      gi.setZero();
      cols.noalias() = g * params.weight.transpose();
      col2im_add(cols, params, gi);
    }
  }
}

// ---------------------------------------------------------------------------

void BatchNormParams::zero_grad() {
  grad_gamma.setZero(gamma.size());
  grad_beta.setZero(beta.size());
}

void BatchNormParams::append_params(const std::string& prefix, std::vector<ParamRef>& out) {
  if (grad_gamma.size() != gamma.size()) zero_grad();
  push_param(out, prefix + ".gamma", gamma.data(), grad_gamma.data(), gamma.size());
  push_param(out, prefix + ".beta", beta.data(), grad_beta.data(), beta.size());
}

BatchNormParams make_batch_norm(Index features, double momentum, double epsilon) {
  if (features < 1) throw Error(ErrorCode::kConfig, "batch norm needs at least one feature");
  if (!(epsilon > 0.0)) throw Error(ErrorCode::kConfig, "batch norm epsilon must be positive");
  BatchNormParams p;
  p.gamma.setOnes(features);
  p.beta.setZero(features);
  p.running_mean.setZero(features);
  p.running_var.setOnes(features);
  p.momentum = momentum;
  p.epsilon = epsilon;
  p.zero_grad();
  return p;
}

namespace {

// Row ranges (first row, count) that hold valid data.
using Ranges = std::vector<std::pair<Index, Index>>;

Ranges ranges_of(const Matrix& m) { return {{0, m.rows()}}; }

Ranges ranges_of(const SegmentedMap& m) {
  Ranges r;
  r.reserve(m.segments());
  for (std::size_t i = 0; i < m.segments(); ++i) r.emplace_back(m.offsets[i], m.rows_of(i));
  return r;
}

using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;
using RowMap = Eigen::Map<RowArray>;
using ConstRowMap = Eigen::Map<const RowArray>;

void normalize_rows(Matrix& x, const Ranges& ranges, const BatchNormParams& params, Mode mode,
                    BatchNormCache& cache) {
  const Index cols = x.cols();
  if (cols != params.features()) throw Error(ErrorCode::kShapeMismatch, "batch norm feature count mismatch");
  Index m = 0;
  for (const auto& [first, count] : ranges) m += count;
  cache.mode = mode;
  cache.rows = m;
  if (mode == Mode::kTrain) {
    if (m < 2) throw Error(ErrorCode::kBatchTooSmall, "train-mode batch norm needs at least two rows");
    // One pass of shifted sums; the shift (the first valid row) keeps the
    // E[d^2] - E[d]^2 form from cancelling when the mean is large.
    RowArray shift;
    for (const auto& [first, count] : ranges) {
      if (count > 0) {
        shift = ConstRowMap(x.data() + first * cols, cols);
        break;
      }
    }
    RowArray sum = RowArray::Zero(cols);
    RowArray sum_sq = RowArray::Zero(cols);
    for (const auto& [first, count] : ranges) {
      for (Index r = first; r < first + count; ++r) {
        const auto d = ConstRowMap(x.data() + r * cols, cols) - shift;
        sum += d;
        sum_sq += d.square();
      }
    }
    const RowArray mean_d = sum / static_cast<double>(m);
    cache.mean = (shift + mean_d).matrix();
    cache.var = (sum_sq / static_cast<double>(m) - mean_d.square()).max(0.0).matrix();
  } else {
    cache.mean = params.running_mean;
    cache.var = params.running_var;
  }
  cache.inv_std = (cache.var.array() + params.epsilon).rsqrt().matrix();
  const ConstRowMap mean(cache.mean.data(), cols);
  const ConstRowMap inv_std(cache.inv_std.data(), cols);
  for (const auto& [first, count] : ranges) {
    for (Index r = first; r < first + count; ++r) {
      RowMap row(x.data() + r * cols, cols);
      row = (row - mean) * inv_std;
    }
  }
}

void scale_shift_relu_rows(const Matrix& x_hat, const Ranges& ranges, const BatchNormParams& params, Matrix& out) {
  const Index cols = x_hat.cols();
  out.resize(x_hat.rows(), cols);
  const ConstRowMap gamma(params.gamma.data(), cols);
  const ConstRowMap beta(params.beta.data(), cols);
  for (const auto& [first, count] : ranges) {
    for (Index r = first; r < first + count; ++r) {
      RowMap(out.data() + r * cols, cols) = (ConstRowMap(x_hat.data() + r * cols, cols) * gamma + beta).max(0.0);
    }
  }
}

void backward_rows(const Matrix& x_hat, const Ranges& ranges, BatchNormParams& params, const BatchNormCache& cache,
                   Matrix& grad) {
  const Index cols = x_hat.cols();
  if (params.grad_gamma.size() != params.gamma.size()) params.zero_grad();
  const ConstRowMap gamma(params.gamma.data(), cols);
  const ConstRowMap beta(params.beta.data(), cols);
  // The ReLU mask is recomputed from x_hat with the forward's expression.
  RowArray sum_dy = RowArray::Zero(cols);
  RowArray sum_dy_xhat = RowArray::Zero(cols);
  for (const auto& [first, count] : ranges) {
    for (Index r = first; r < first + count; ++r) {
      const ConstRowMap xh(x_hat.data() + r * cols, cols);
      RowMap g(grad.data() + r * cols, cols);
      g = (xh * gamma + beta > 0.0).select(g, 0.0);
      sum_dy += g;
      sum_dy_xhat += g * xh;
    }
  }
  params.grad_gamma.array() += sum_dy_xhat;
  params.grad_beta.array() += sum_dy;
  const RowArray a = gamma * cache.inv_std.array();
  if (cache.mode == Mode::kInfer) {
    for (const auto& [first, count] : ranges) {
      for (Index r = first; r < first + count; ++r) RowMap(grad.data() + r * cols, cols) *= a;
    }
    return;
  }
  // d x = gamma * inv_std / m * (m * dy - sum(dy) - x_hat * sum(dy * x_hat))
  const double m = static_cast<double>(cache.rows);
  const RowArray b = a * sum_dy / m;
  const RowArray c = a * sum_dy_xhat / m;
  for (const auto& [first, count] : ranges) {
    for (Index r = first; r < first + count; ++r) {
      RowMap g(grad.data() + r * cols, cols);
      g = g * a - b - ConstRowMap(x_hat.data() + r * cols, cols) * c;
    }
  }
}

}  // namespace

void batch_norm_normalize(Matrix& x, const BatchNormParams& params, Mode mode, BatchNormCache& cache) {
  normalize_rows(x, ranges_of(x), params, mode, cache);
}

void batch_norm_normalize(SegmentedMap& x, const BatchNormParams& params, Mode mode, BatchNormCache& cache) {
  normalize_rows(x.data, ranges_of(x), params, mode, cache);
}

void update_running_stats(BatchNormParams& params, const BatchNormCache& cache) {
  if (cache.mode != Mode::kTrain) return;
  const double mom = params.momentum;
  const double m = static_cast<double>(cache.rows);
  params.running_mean = (1.0 - mom) * params.running_mean + mom * cache.mean;
  params.running_var = (1.0 - mom) * params.running_var + mom * cache.var * (m / (m - 1.0));
}

Matrix batch_norm_forward(const Matrix& x, BatchNormParams& params, Mode mode, bool update_running) {
  Matrix out = x;
  BatchNormCache cache;
  batch_norm_normalize(out, params, mode, cache);
  if (update_running) update_running_stats(params, cache);
  out.array().rowwise() *= params.gamma.array();
  out.rowwise() += params.beta;
  return out;
}

void scale_shift_relu(const Matrix& x_hat, const BatchNormParams& params, Matrix& out) {
  scale_shift_relu_rows(x_hat, ranges_of(x_hat), params, out);
}

void scale_shift_relu(const SegmentedMap& x_hat, const BatchNormParams& params, SegmentedMap& out) {
  out.offsets = x_hat.offsets;
  out.lengths = x_hat.lengths;
  scale_shift_relu_rows(x_hat.data, ranges_of(x_hat), params, out.data);
}

void scale_shift_relu_batch_norm_backward(const Matrix& x_hat, BatchNormParams& params, const BatchNormCache& cache,
                                          Matrix& grad) {
  backward_rows(x_hat, ranges_of(x_hat), params, cache, grad);
}

void scale_shift_relu_batch_norm_backward(const SegmentedMap& x_hat, BatchNormParams& params,
                                          const BatchNormCache& cache, SegmentedMap& grad) {
  backward_rows(x_hat.data, ranges_of(x_hat), params, cache, grad.data);
}

// ---------------------------------------------------------------------------

double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

KMaxResult kmax_pool(std::span<const double> seq, std::size_t k) {
  if (k == 0 || seq.size() < k) {
    throw Error(ErrorCode::kTooShort, "k-max pooling needs 1 <= k <= length (k=" + std::to_string(k) +
                                          ", length=" + std::to_string(seq.size()) + ")");
  }
  std::vector<std::size_t> order(seq.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return seq[a] > seq[b] || (seq[a] == seq[b] && a < b); });
  KMaxResult out;
  out.positions.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.positions.begin(), out.positions.end());
  for (auto p : out.positions) out.values.push_back(seq[p]);
  return out;
}

void kmax_pool_columns(const Eigen::Ref<const Matrix>& map, std::size_t k, ColumnKMax& out) {
  const Index rows = map.rows();
  const Index channels = map.cols();
  if (k == 0 || rows < static_cast<Index>(k)) {
    throw Error(ErrorCode::kTooShort, "k-max pooling needs 1 <= k <= positions (k=" + std::to_string(k) +
                                          ", positions=" + std::to_string(rows) + ")");
  }
  const auto kk = static_cast<Index>(k);
  out.values.resize(static_cast<std::size_t>(channels * kk));
  out.positions.resize(static_cast<std::size_t>(channels * kk));
  // Per channel, the best k so far sorted by value (descending); strict
  // comparison keeps the earlier position on ties.
  std::vector<double> best_val(static_cast<std::size_t>(channels * kk));
  std::vector<Index> best_pos(static_cast<std::size_t>(channels * kk));
  for (Index c = 0; c < channels; ++c) {
    for (Index t = 0; t < kk; ++t) {
      best_val[static_cast<std::size_t>(c * kk + t)] = map(t, c);
      best_pos[static_cast<std::size_t>(c * kk + t)] = t;
    }
    // Insertion-sort the seed rows.
    for (Index t = 1; t < kk; ++t) {
      for (Index u = t; u > 0; --u) {
        auto& hi = best_val[static_cast<std::size_t>(c * kk + u - 1)];
        auto& lo = best_val[static_cast<std::size_t>(c * kk + u)];
        if (lo > hi) {
          std::swap(hi, lo);
          std::swap(best_pos[static_cast<std::size_t>(c * kk + u - 1)], best_pos[static_cast<std::size_t>(c * kk + u)]);
        } else {
          break;
        }
      }
    }
  }
  for (Index p = kk; p < rows; ++p) {
    const double* row = map.data() + p * map.outerStride();
    for (Index c = 0; c < channels; ++c) {
      double* val = best_val.data() + c * kk;
      Index* pos = best_pos.data() + c * kk;
      const double v = row[c];
      if (!(v > val[kk - 1])) continue;
      Index u = kk - 1;
      while (u > 0 && v > val[u - 1]) {
        val[u] = val[u - 1];
        pos[u] = pos[u - 1];
        --u;
      }
      val[u] = v;
      pos[u] = p;
    }
  }
  for (Index c = 0; c < channels; ++c) {
    Index* pos = best_pos.data() + c * kk;
    std::sort(pos, pos + kk);
    for (Index t = 0; t < kk; ++t) {
      out.positions[static_cast<std::size_t>(c * kk + t)] = pos[t];
      out.values[static_cast<std::size_t>(c * kk + t)] = map(pos[t], c);
    }
  }
}

// ---------------------------------------------------------------------------

void DenseParams::zero_grad() {
  grad_weight.setZero(weight.rows(), weight.cols());
  grad_bias.setZero(bias.size());
}

void DenseParams::append_params(const std::string& prefix, std::vector<ParamRef>& out) {
  if (grad_weight.size() != weight.size()) zero_grad();
  push_param(out, prefix + ".weight", weight.data(), grad_weight.data(), weight.size());
  push_param(out, prefix + ".bias", bias.data(), grad_bias.data(), bias.size());
}

DenseParams make_dense(Index inputs, Index outputs, Rng& rng) {
  if (inputs < 1 || outputs < 1) throw Error(ErrorCode::kConfig, "dense layer dimensions must be positive");
  DenseParams p;
  p.weight.resize(inputs, outputs);
  fill_uniform(p.weight, init_limit(inputs), rng);
  p.bias.setZero(outputs);
  p.zero_grad();
  return p;
}

Vector dense(const Vector& x, const DenseParams& params) {
  if (x.size() != params.inputs()) {
    throw Error(ErrorCode::kShapeMismatch, "dense input has length " + std::to_string(x.size()) + ", expected " +
                                               std::to_string(params.inputs()));
  }
  return params.weight.transpose() * x + params.bias.transpose();
}

// ---------------------------------------------------------------------------

LossValue bce_l2_loss(std::span<const double> predictions, std::span<const double> labels,
                      std::span<const Matrix* const> regularized, double lambda) {
  if (predictions.size() != labels.size() || predictions.empty()) {
    throw Error(ErrorCode::kShapeMismatch, "predictions and labels must be non-empty and equally long");
  }
  LossValue loss;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double y = predictions[i];
    const double t = labels[i];
    if (!(y >= 0.0 && y <= 1.0)) throw Error(ErrorCode::kDomain, "prediction outside [0, 1]");
    if (t != 0.0 && t != 1.0) throw Error(ErrorCode::kDomain, "label must be 0 or 1");
    const double yc = std::clamp(y, kProbabilityClamp, 1.0 - kProbabilityClamp);
    loss.cross_entropy -= t * std::log(yc) + (1.0 - t) * std::log(1.0 - yc);
  }
  loss.cross_entropy /= static_cast<double>(predictions.size());
  for (const Matrix* w : regularized) loss.regularization += w->norm();
  loss.regularization *= lambda;
  loss.total = loss.cross_entropy + loss.regularization;
  return loss;
}

void add_l2_norm_gradient(const Matrix& weight, double lambda, Matrix& grad) {
  const double n = weight.norm();
  if (n > 0.0 && lambda != 0.0) grad += (lambda / n) * weight;
}

// ---------------------------------------------------------------------------

bool all_finite(std::span<const ParamRef> params) {
  for (const auto& p : params) {
    if (!Eigen::Map<const Eigen::ArrayXd>(p.grad, static_cast<Index>(p.size)).isFinite().all()) return false;
  }
  return true;
}

void adam_step(std::span<const ParamRef> params, AdamState& state) {
  for (const auto& p : params) {
    if (!Eigen::Map<const Eigen::ArrayXd>(p.grad, static_cast<Index>(p.size)).isFinite().all()) {
      throw Error(ErrorCode::kNonFiniteGradient, "non-finite gradient in " + p.name);
    }
  }
  if (state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (const auto& p : params) {
      state.first_moment.push_back(Eigen::ArrayXd::Zero(static_cast<Index>(p.size)));
      state.second_moment.push_back(Eigen::ArrayXd::Zero(static_cast<Index>(p.size)));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != static_cast<Index>(p.size)) throw Error(ErrorCode::kShapeMismatch, "Adam state shape mismatch for " + p.name);
    Eigen::Map<const Eigen::ArrayXd> g(p.grad, static_cast<Index>(p.size));
    Eigen::Map<Eigen::ArrayXd> w(p.value, static_cast<Index>(p.size));
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.square();
    w -= state.learning_rate * (m / c1) / ((v / c2).sqrt() + state.epsilon);
  }
}

// ---------------------------------------------------------------------------

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [&](const GradCheckEntry& e) { return e.max_rel_error <= tolerance; });
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

GradCheckReport grad_check(const std::function<double()>& loss, const std::function<void()>& compute_gradients,
                           std::span<const ParamRef> params, const GradCheckOptions& options) {
  return grad_check([&](std::size_t, std::size_t) { return LossProbe{loss(), 0}; }, compute_gradients, params,
                    options);
}

GradCheckReport grad_check(const std::function<LossProbe(std::size_t, std::size_t)>& loss,
                           const std::function<void()>& compute_gradients, std::span<const ParamRef> params,
                           const GradCheckOptions& options) {
  compute_gradients();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad, p.grad + p.size);

  GradCheckReport report;
  report.tolerance = options.tolerance;
  Rng rng(derive_seed(options.seed, 0x6C4Eu));
  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto& p = params[t];
    std::vector<std::size_t> indices(p.size);
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (options.max_per_tensor > 0 && indices.size() > options.max_per_tensor) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(options.max_per_tensor);
      std::sort(indices.begin(), indices.end());
    }
    GradCheckEntry entry;
    entry.name = p.name;
    for (const auto i : indices) {
      const double saved = p.value[i];
      double step = options.step;
      double numeric = 0.0;
      for (int attempt = 0;; ++attempt) {
        p.value[i] = saved + step;
        const LossProbe up = loss(t, i);
        p.value[i] = saved - step;
        const LossProbe down = loss(t, i);
        p.value[i] = saved;
        numeric = (up.value - down.value) / (2.0 * step);
        if (up.regime == down.regime) break;
        if (attempt == options.max_refinements) {
          ++entry.unresolved;
          break;
        }
        if (attempt == 0) ++entry.refined;
        step /= 10.0;
      }
      const double a = analytic[t][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), options.magnitude_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      if (rel > entry.max_rel_error || entry.checked == 0) {
        entry.max_rel_error = std::max(entry.max_rel_error, rel);
        if (rel >= entry.max_rel_error) {
          entry.worst_index = i;
          entry.worst_analytic = a;
          entry.worst_numeric = numeric;
        }
      }
      ++entry.checked;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace csw::nn
