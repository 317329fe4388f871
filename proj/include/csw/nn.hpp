#pragma once

// Minimal neural-network kernel for the detector: valid 1-D convolution over
// frame sequences, batch normalization, ReLU, k-max pooling, dense layers,
// sigmoid / cross-entropy loss and Adam. Every layer has a hand-written
// backward pass; grad_check() compares them against central differences.
//
// Feature maps are position-major: a map with P positions and C channels is a
// row-major P x C matrix, so row p is the feature vector at position p. A
// batch of maps is stacked vertically (see SegmentedMap).

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "csw/rng.hpp"

namespace csw::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Position-major feature map (positions x channels).
using Tensor2 = Matrix;

enum class Mode { kTrain, kInfer };

/// A trainable tensor exposed to the optimizer and the gradient checker.
struct ParamRef {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;
  std::size_t size = 0;
};

// ---------------------------------------------------------------------------
// Convolution

/// `kernels` filters of `width` taps over `in_channels` input channels.
/// weight is (width * in_channels) x kernels; row s * in_channels + r is tap
/// (channel r, offset s). One scalar bias per kernel.
struct ConvLayerParams {
  int in_channels = 0;
  int width = 0;
  int kernels = 0;
  int stride = 1;
  Matrix weight;
  RowVector bias;
  Matrix grad_weight;
  RowVector grad_bias;

  double tap(int kernel, int channel, int offset) const {
    return weight(static_cast<Index>(offset) * in_channels + channel, kernel);
  }
  /// Number of valid output positions for an input of `positions` frames
  /// ((positions - width) / stride + 1), or 0 if the input is too short.
  Index output_length(Index positions) const;
  void zero_grad();
  void append_params(const std::string& prefix, std::vector<ParamRef>& out);
};

/// Fan-in scaled uniform weights (limit 1 / sqrt(fan_in)), zero bias.
ConvLayerParams make_conv(int in_channels, int width, int kernels, Rng& rng, int stride = 1);

/// output(p, q) = bias_q + sum_{r,s} tap_q(r, s) * input(p * stride + s, r).
/// Throws ShapeMismatch if the channel count differs or input is shorter than
/// the kernel.
Tensor2 conv_valid(const Tensor2& input, const ConvLayerParams& params);

/// Accumulates weight/bias gradients into `params`; writes the input gradient
/// into `grad_input` when non-null.
void conv_backward(const Tensor2& input, const Tensor2& grad_output, ConvLayerParams& params,
                   Tensor2* grad_input);

// ---------------------------------------------------------------------------
// Batched maps

/// Several feature maps stacked row-wise; sample i owns the slot of rows
/// [offsets[i], offsets[i + 1]), of which the first lengths[i] are valid (all
/// of them when `lengths` is empty). Maps derived from a batch keep the
/// batch's slots, so every layer of a batch has the same row count and the
/// buffers can be reused from step to step; rows past a segment's length are
/// scratch and never read.
struct SegmentedMap {
  Matrix data;
  std::vector<Index> offsets{0};
  std::vector<Index> lengths;

  std::size_t segments() const noexcept { return offsets.size() - 1; }
  Index rows_of(std::size_t i) const { return lengths.empty() ? offsets[i + 1] - offsets[i] : lengths[i]; }
  Index valid_rows() const;
  auto segment(std::size_t i) { return data.middleRows(offsets[i], rows_of(i)); }
  auto segment(std::size_t i) const { return data.middleRows(offsets[i], rows_of(i)); }
};

/// `out` takes the slots of `input`; its storage is reused when the shape
/// matches.
void conv_forward(const SegmentedMap& input, const ConvLayerParams& params, SegmentedMap& out);
SegmentedMap conv_forward(const SegmentedMap& input, const ConvLayerParams& params);
/// `grad_input` takes the layout of `input`.
void conv_backward(const SegmentedMap& input, const SegmentedMap& grad_output, ConvLayerParams& params,
                   SegmentedMap* grad_input);

// ---------------------------------------------------------------------------
// Batch normalization (per channel, statistics over all rows of the batch)

struct BatchNormParams {
  RowVector gamma;
  RowVector beta;
  RowVector running_mean;
  RowVector running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  RowVector grad_gamma;
  RowVector grad_beta;

  Index features() const noexcept { return gamma.size(); }
  void zero_grad();
  void append_params(const std::string& prefix, std::vector<ParamRef>& out);
};

/// gamma = 1, beta = 0, running mean 0, running variance 1.
BatchNormParams make_batch_norm(Index features, double momentum = 0.1, double epsilon = 1e-5);

/// Per-forward statistics needed by the backward pass.
struct BatchNormCache {
  Mode mode = Mode::kTrain;
  RowVector mean;
  RowVector var;  // biased batch variance (train) or running variance (infer)
  RowVector inv_std;
  Index rows = 0;
};

/// Rows are samples, columns features. Train mode normalizes by the batch
/// mean / biased variance and, if `update_running`, folds them into the
/// running statistics (unbiased variance); infer mode uses running stats.
/// Throws BatchTooSmall for fewer than two rows in train mode.
Matrix batch_norm_forward(const Matrix& x, BatchNormParams& params, Mode mode, bool update_running = true);

/// In-place normalization: `x` becomes x_hat (before gamma and beta are
/// applied). Running statistics are left alone; see update_running_stats.
/// The segmented form pools statistics over the valid rows of every segment.
void batch_norm_normalize(Matrix& x, const BatchNormParams& params, Mode mode, BatchNormCache& cache);
void batch_norm_normalize(SegmentedMap& x, const BatchNormParams& params, Mode mode, BatchNormCache& cache);

/// Momentum update of the running mean / unbiased variance from a train-mode
/// cache.
void update_running_stats(BatchNormParams& params, const BatchNormCache& cache);

/// y = relu(gamma * x_hat + beta), row by row.
void scale_shift_relu(const Matrix& x_hat, const BatchNormParams& params, Matrix& out);
void scale_shift_relu(const SegmentedMap& x_hat, const BatchNormParams& params, SegmentedMap& out);

/// Backward through relu(gamma * x_hat + beta) and the normalization recorded
/// in `cache` (batch statistics in train mode, constants in infer mode).
/// Overwrites `grad` (d loss / d activated) with d loss / d pre-norm input and
/// accumulates gamma/beta gradients.
void scale_shift_relu_batch_norm_backward(const Matrix& x_hat, BatchNormParams& params, const BatchNormCache& cache,
                                          Matrix& grad);
void scale_shift_relu_batch_norm_backward(const SegmentedMap& x_hat, BatchNormParams& params,
                                          const BatchNormCache& cache, SegmentedMap& grad);

// ---------------------------------------------------------------------------
// Elementwise

template <typename Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
  return x.cwiseMax(0.0);
}

double sigmoid(double x) noexcept;

// ---------------------------------------------------------------------------
// k-max pooling

struct KMaxResult {
  std::vector<double> values;       // length k, original order
  std::vector<std::size_t> positions;  // ascending
};

/// The k largest entries of `seq` as an order-preserving subsequence; ties go
/// to the earlier position. Throws TooShort if seq.size() < k or k == 0.
KMaxResult kmax_pool(std::span<const double> seq, std::size_t k);

/// Column-wise k-max over the rows of one map. values/positions are
/// (channels x k), row-major: channel c's picks occupy [c*k, (c+1)*k).
struct ColumnKMax {
  std::vector<double> values;
  std::vector<Index> positions;
};
void kmax_pool_columns(const Eigen::Ref<const Matrix>& map, std::size_t k, ColumnKMax& out);

// ---------------------------------------------------------------------------
// Dense

/// weight is in x out; out_j = sum_i weight(i, j) x_i + bias_j.
struct DenseParams {
  Matrix weight;
  RowVector bias;
  Matrix grad_weight;
  RowVector grad_bias;

  Index inputs() const noexcept { return weight.rows(); }
  Index outputs() const noexcept { return weight.cols(); }
  void zero_grad();
  void append_params(const std::string& prefix, std::vector<ParamRef>& out);
};

DenseParams make_dense(Index inputs, Index outputs, Rng& rng);

/// Throws ShapeMismatch.
Vector dense(const Vector& x, const DenseParams& params);

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kProbabilityClamp = 1e-7;

struct LossValue {
  double total = 0.0;
  double cross_entropy = 0.0;
  double regularization = 0.0;
};

/// -(1/N) sum[t log y + (1 - t) log(1 - y)] + lambda * sum_k ||W_k||_2, with y
/// clamped to [1e-7, 1 - 1e-7]. Throws DomainError for y outside [0, 1] or
/// labels outside {0, 1}.
LossValue bce_l2_loss(std::span<const double> predictions, std::span<const double> labels,
                      std::span<const Matrix* const> regularized, double lambda);

/// Adds lambda * W / ||W|| to `grad` (zero when W is zero).
void add_l2_norm_gradient(const Matrix& weight, double lambda, Matrix& grad);

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<Eigen::ArrayXd> first_moment;
  std::vector<Eigen::ArrayXd> second_moment;
};

/// One bias-corrected Adam update of every parameter from its `grad`.
/// Throws NonFiniteGradient (leaving parameters untouched) on NaN/Inf.
void adam_step(std::span<const ParamRef> params, AdamState& state);

bool all_finite(std::span<const ParamRef> params);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, magnitude_floor). Central
  // differences of an O(1) loss carry ~1e-16 / step = 1e-11 of rounding, so
  // a gradient that is exactly zero (e.g. a bias followed by batch norm) would
  // otherwise be judged on noise divided by noise.
  double magnitude_floor = 1e-6;
  std::size_t max_per_tensor = 0;  // 0 = every element
  std::uint64_t seed = 0;          // picks the subset when max_per_tensor > 0
  int max_refinements = 3;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t refined = 0;     // entries whose probes straddled a kink at `step`
  std::size_t unresolved = 0;  // still straddling after every refinement
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const;
  double max_rel_error() const;
};

/// `loss` evaluates the objective at the current parameter values;
/// `compute_gradients` fills every ParamRef::grad at the current values.
GradCheckReport grad_check(const std::function<double()>& loss, const std::function<void()>& compute_gradients,
                           std::span<const ParamRef> params, const GradCheckOptions& options = {});

/// A loss evaluation plus an identifier of the smooth piece it falls in (for
/// example a hash of k-max selections and ReLU signs). When the two probes of
/// a central difference land in different pieces the quotient straddles a
/// kink, so the step is shrunk (up to max_refinements times by 10x).
struct LossProbe {
  double value = 0.0;
  std::uint64_t regime = 0;
};

/// `loss(tensor, element)` is told which entry of params[tensor] is currently
/// perturbed, so it may recompute only what that entry influences.
GradCheckReport grad_check(const std::function<LossProbe(std::size_t, std::size_t)>& loss,
                           const std::function<void()>& compute_gradients, std::span<const ParamRef> params,
                           const GradCheckOptions& options = {});

}  // namespace csw::nn
