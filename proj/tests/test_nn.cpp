#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "csw/error.hpp"
#include "csw/nn.hpp"
#include "support.hpp"

using namespace csw;
using namespace csw::nn;
using csw::test::random_matrix;

namespace {

// output(p, q) = bias_q + sum_{r,s} tap_q(r, s) * input(p * stride + s, r),
// straight from the definition.
Matrix naive_conv(const Matrix& input, const ConvLayerParams& c) {
  const Index len = (input.rows() - c.width) / c.stride + 1;
  Matrix out(len, c.kernels);
  for (Index p = 0; p < len; ++p) {
    for (int q = 0; q < c.kernels; ++q) {
      double acc = c.bias(q);
      for (int s = 0; s < c.width; ++s) {
        for (int r = 0; r < c.in_channels; ++r) acc += c.tap(q, r, s) * input(p * c.stride + s, r);
      }
      out(p, q) = acc;
    }
  }
  return out;
}

// Position i is picked iff fewer than k positions beat it, where j beats i
// when v[j] > v[i], or v[j] == v[i] and j < i.
std::vector<std::size_t> rank_oracle(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t beaten_by = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (v[j] > v[i] || (v[j] == v[i] && j < i)) ++beaten_by;
    }
    if (beaten_by < k) picked.push_back(i);
  }
  return picked;
}

double central_difference(double& x, const std::function<double()>& f, double h = 1e-6) {
  const double saved = x;
  x = saved + h;
  const double up = f();
  x = saved - h;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * h);
}

void check_close(double analytic, double numeric, double tol = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
  CHECK(std::abs(analytic - numeric) / scale < tol);
}

}  // namespace

TEST_CASE("conv_valid agrees with the definition") {
  Rng rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    const int in_ch = 1 + static_cast<int>(rng() % 5);
    const int width = 1 + static_cast<int>(rng() % 6);
    const int kernels = 1 + static_cast<int>(rng() % 7);
    const int stride = 1 + static_cast<int>(rng() % 3);
    const Index rows = width + static_cast<Index>(rng() % 20);
    auto conv = make_conv(in_ch, width, kernels, rng, stride);
    conv.bias = random_matrix(1, kernels, rng);
    const Matrix x = random_matrix(rows, in_ch, rng);
    const Matrix got = conv_valid(x, conv);
    const Matrix want = naive_conv(x, conv);
    REQUIRE(got.rows() == want.rows());
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv_valid rejects bad shapes") {
  Rng rng(2);
  const auto conv = make_conv(3, 5, 4, rng);
  CHECK_THROWS_AS(conv_valid(Matrix::Zero(4, 3), conv), Error);
  CHECK_THROWS_AS(conv_valid(Matrix::Zero(10, 2), conv), Error);
  CHECK(conv.output_length(4) == 0);
  CHECK(conv.output_length(1000) == 996);
}

TEST_CASE("conv_backward matches finite differences") {
  Rng rng(3);
  for (int stride : {1, 2}) {
    auto conv = make_conv(3, 4, 5, rng, stride);
    conv.bias = random_matrix(1, 5, rng);
    Matrix x = random_matrix(13, 3, rng);
    const Index len = conv.output_length(x.rows());
    const Matrix r = random_matrix(len, 5, rng);
    auto loss = [&] { return conv_valid(x, conv).cwiseProduct(r).sum(); };
    conv.zero_grad();
    Matrix gx;
    conv_backward(x, r, conv, &gx);
    for (Index i = 0; i < conv.weight.size(); ++i) {
      check_close(conv.grad_weight.data()[i], central_difference(conv.weight.data()[i], loss));
    }
    for (Index i = 0; i < conv.bias.size(); ++i) check_close(conv.grad_bias(i), central_difference(conv.bias(i), loss));
    for (Index i = 0; i < x.size(); ++i) check_close(gx.data()[i], central_difference(x.data()[i], loss));
  }
}

TEST_CASE("segmented conv keeps slots and matches per-sample conv") {
  Rng rng(4);
  auto conv = make_conv(3, 5, 6, rng);
  conv.bias = random_matrix(1, 6, rng);
  const std::vector<Index> lengths{7, 12, 5};
  SegmentedMap in;
  for (auto n : lengths) in.offsets.push_back(in.offsets.back() + n);
  in.data = random_matrix(in.offsets.back(), 3, rng);

  const SegmentedMap out = conv_forward(in, conv);
  CHECK(out.data.rows() == in.data.rows());
  CHECK(out.offsets == in.offsets);
  CHECK(out.valid_rows() == 3 + 8 + 1);
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const Matrix want = conv_valid(Matrix(in.segment(i)), conv);
    CHECK(out.rows_of(i) == want.rows());
    CHECK((Matrix(out.segment(i)) - want).cwiseAbs().maxCoeff() < 1e-12);
  }

  // Backward: the segmented result equals the sum of per-sample backward
  // passes, and the input gradient keeps the input's layout.
  SegmentedMap g;
  g.offsets = out.offsets;
  g.lengths = out.lengths;
  g.data = random_matrix(out.data.rows(), 6, rng);
  conv.zero_grad();
  SegmentedMap gin;
  conv_backward(in, g, conv, &gin);
  const Matrix gw = conv.grad_weight;
  const RowVector gb = conv.grad_bias;
  conv.zero_grad();
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    Matrix gx;
    conv_backward(Matrix(in.segment(i)), Matrix(g.segment(i)), conv, &gx);
    CHECK((Matrix(gin.segment(i)) - gx).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK((gw - conv.grad_weight).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((gb - conv.grad_bias).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("k-max pooling picks the order-preserving top k") {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 12;
    const std::size_t k = 1 + rng() % n;
    std::vector<double> v(n);
    // Few distinct values so ties are common.
    for (auto& x : v) x = static_cast<double>(rng() % 4) - 1.0;
    const auto got = kmax_pool(v, k);
    const auto want = rank_oracle(v, k);
    REQUIRE(got.positions == want);
    for (std::size_t t = 0; t < k; ++t) CHECK(got.values[t] == v[want[t]]);
  }
  CHECK_THROWS_AS(kmax_pool(std::vector<double>{1.0}, 2), Error);
  CHECK_THROWS_AS(kmax_pool(std::vector<double>{1.0}, 0), Error);
}

TEST_CASE("column k-max agrees with the scalar version") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Index rows = 3 + static_cast<Index>(rng() % 15);
    const Index cols = 1 + static_cast<Index>(rng() % 5);
    const std::size_t k = 1 + rng() % 3;
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(rng() % 5);
    ColumnKMax out;
    kmax_pool_columns(m, k, out);
    for (Index c = 0; c < cols; ++c) {
      std::vector<double> col;
      for (Index r = 0; r < rows; ++r) col.push_back(m(r, c));
      const auto want = kmax_pool(col, k);
      for (std::size_t t = 0; t < k; ++t) {
        CHECK(out.positions[static_cast<std::size_t>(c) * k + t] == static_cast<Index>(want.positions[t]));
        CHECK(out.values[static_cast<std::size_t>(c) * k + t] == want.values[t]);
      }
    }
  }
}

TEST_CASE("batch norm uses batch statistics in train mode and running ones in infer mode") {
  Rng rng(7);
  const Matrix x = random_matrix(9, 4, rng, 3.0);
  auto bn = make_batch_norm(4, 0.1, 1e-5);
  bn.gamma << 1.0, 2.0, 0.5, -1.0;
  bn.beta << 0.0, 1.0, -1.0, 0.25;
  const Matrix y = batch_norm_forward(x, bn, Mode::kTrain);
  for (Index c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (Index r = 0; r < 9; ++r) mean += x(r, c);
    mean /= 9.0;
    double var = 0.0;
    for (Index r = 0; r < 9; ++r) var += (x(r, c) - mean) * (x(r, c) - mean);
    const double biased = var / 9.0;
    for (Index r = 0; r < 9; ++r) {
      CHECK(y(r, c) == doctest::Approx(bn.gamma(c) * (x(r, c) - mean) / std::sqrt(biased + 1e-5) + bn.beta(c)).epsilon(1e-12));
    }
    CHECK(bn.running_mean(c) == doctest::Approx(0.1 * mean).epsilon(1e-12));
    CHECK(bn.running_var(c) == doctest::Approx(0.9 + 0.1 * var / 8.0).epsilon(1e-12));
  }
  const Matrix z = batch_norm_forward(x, bn, Mode::kInfer);
  for (Index c = 0; c < 4; ++c) {
    for (Index r = 0; r < 9; ++r) {
      const double want = bn.gamma(c) * (x(r, c) - bn.running_mean(c)) / std::sqrt(bn.running_var(c) + 1e-5) + bn.beta(c);
      CHECK(z(r, c) == doctest::Approx(want).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(batch_norm_forward(Matrix::Ones(1, 4), bn, Mode::kTrain), Error);
}

TEST_CASE("segmented batch norm pools statistics over valid rows only") {
  Rng rng(8);
  SegmentedMap m;
  m.offsets = {0, 6, 10};
  m.lengths = {4, 3};
  m.data = random_matrix(10, 3, rng);
  m.data.row(4).setConstant(1e6);  // scratch rows must not matter
  m.data.row(5).setConstant(-1e6);
  m.data.row(9).setConstant(std::numeric_limits<double>::quiet_NaN());
  Matrix packed(7, 3);
  packed << m.data.middleRows(0, 4), m.data.middleRows(6, 3);
  auto bn = make_batch_norm(3);
  BatchNormCache a;
  BatchNormCache b;
  Matrix packed_hat = packed;
  batch_norm_normalize(packed_hat, bn, Mode::kTrain, a);
  batch_norm_normalize(m, bn, Mode::kTrain, b);
  CHECK(b.rows == 7);
  CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((a.var - b.var).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((Matrix(m.segment(0)) - packed_hat.topRows(4)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((Matrix(m.segment(1)) - packed_hat.bottomRows(3)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("batch norm + ReLU backward matches finite differences") {
  Rng rng(9);
  for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
    Matrix x = random_matrix(8, 3, rng, 2.0);
    auto bn = make_batch_norm(3);
    bn.gamma << 1.5, -0.7, 0.9;
    bn.beta << 0.2, 0.1, -0.3;
    bn.running_mean << 0.1, -0.2, 0.3;
    bn.running_var << 1.2, 0.8, 2.0;
    const Matrix r = random_matrix(8, 3, rng);
    auto loss = [&] {
      Matrix h = x;
      BatchNormCache cache;
      batch_norm_normalize(h, bn, mode, cache);
      Matrix y;
      scale_shift_relu(h, bn, y);
      return y.cwiseProduct(r).sum();
    };
    Matrix h = x;
    BatchNormCache cache;
    batch_norm_normalize(h, bn, mode, cache);
    bn.zero_grad();
    Matrix g = r;
    scale_shift_relu_batch_norm_backward(h, bn, cache, g);
    for (Index i = 0; i < x.size(); ++i) check_close(g.data()[i], central_difference(x.data()[i], loss));
    for (Index c = 0; c < 3; ++c) {
      check_close(bn.grad_gamma(c), central_difference(bn.gamma(c), loss));
      check_close(bn.grad_beta(c), central_difference(bn.beta(c), loss));
    }
  }
}

TEST_CASE("running statistics update only from train-mode caches") {
  auto bn = make_batch_norm(2);
  BatchNormCache cache;
  cache.mode = Mode::kInfer;
  cache.mean = RowVector::Constant(2, 5.0);
  cache.var = RowVector::Constant(2, 5.0);
  cache.rows = 10;
  update_running_stats(bn, cache);
  CHECK(bn.running_mean(0) == 0.0);
  CHECK(bn.running_var(0) == 1.0);
}

TEST_CASE("cross-entropy with L2 norms") {
  const std::vector<double> y{0.9, 0.2, 0.0, 1.0};
  const std::vector<double> t{1.0, 0.0, 1.0, 1.0};
  Matrix w(2, 2);
  w << 3.0, 0.0, 0.0, 4.0;
  const Matrix* regs[] = {&w};
  const auto l = bce_l2_loss(y, t, regs, 0.01);
  const double want_ce = -(std::log(0.9) + std::log(0.8) + std::log(1e-7) + std::log(1.0 - 1e-7)) / 4.0;
  CHECK(l.cross_entropy == doctest::Approx(want_ce).epsilon(1e-12));
  CHECK(l.regularization == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(l.total == doctest::Approx(want_ce + 0.05).epsilon(1e-12));
  CHECK_THROWS_AS(bce_l2_loss(std::vector<double>{1.5}, std::vector<double>{1.0}, {}, 0.0), Error);
  CHECK_THROWS_AS(bce_l2_loss(std::vector<double>{0.5}, std::vector<double>{0.5}, {}, 0.0), Error);

  Matrix grad = Matrix::Zero(2, 2);
  add_l2_norm_gradient(w, 0.01, grad);
  auto reg = [&] { return 0.01 * w.norm(); };
  for (Index i = 0; i < 4; ++i) check_close(grad.data()[i], central_difference(w.data()[i], reg));
  Matrix zero = Matrix::Zero(2, 2);
  Matrix g0 = Matrix::Zero(2, 2);
  add_l2_norm_gradient(zero, 0.01, g0);
  CHECK(g0.isZero());
}

TEST_CASE("sigmoid is symmetric and finite at extremes") {
  CHECK(sigmoid(0.0) == 0.5);
  for (double x : {0.3, 2.0, 40.0, 1000.0}) {
    CHECK(sigmoid(x) + sigmoid(-x) == doctest::Approx(1.0).epsilon(1e-15));
  }
  CHECK(sigmoid(-1000.0) >= 0.0);
  CHECK(sigmoid(1000.0) == 1.0);
}

TEST_CASE("dense layer") {
  Rng rng(10);
  auto d = make_dense(3, 2, rng);
  d.bias << 0.5, -0.5;
  Vector x(3);
  x << 1.0, 2.0, 3.0;
  const Vector y = dense(x, d);
  for (Index j = 0; j < 2; ++j) {
    double want = d.bias(j);
    for (Index i = 0; i < 3; ++i) want += d.weight(i, j) * x(i);
    CHECK(y(j) == doctest::Approx(want).epsilon(1e-14));
  }
  CHECK_THROWS_AS(dense(Vector::Zero(2), d), Error);
  CHECK(d.weight.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(3.0));
}

TEST_CASE("Adam follows the bias-corrected update") {
  std::vector<double> w{1.0, -2.0};
  std::vector<double> g{0.5, -0.1};
  std::vector<ParamRef> params{{"w", w.data(), g.data(), 2}};
  AdamState st;
  st.learning_rate = 0.1;
  adam_step(params, st);
  // First step: m_hat = g, v_hat = g^2, so the step is lr * sign(g) (up to eps).
  CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(-2.0 + 0.1 * 0.1 / (0.1 + 1e-8)).epsilon(1e-14));
  g = {0.25, 0.3};
  const double w0 = w[0];
  adam_step(params, st);
  const double m = 0.9 * 0.1 * 0.5 + 0.1 * 0.25;
  const double v = 0.999 * 0.001 * 0.25 + 0.001 * 0.0625;
  const double m_hat = m / (1 - 0.81);
  const double v_hat = v / (1 - 0.999 * 0.999);
  CHECK(w[0] == doctest::Approx(w0 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-12));

  g = {std::numeric_limits<double>::quiet_NaN(), 0.0};
  const auto before = w;
  CHECK_THROWS_AS(adam_step(params, st), Error);
  CHECK(w == before);
  CHECK_FALSE(all_finite(params));
}

TEST_CASE("grad_check flags a wrong gradient") {
  std::vector<double> w{0.3, -0.4};
  std::vector<double> g(2);
  std::vector<ParamRef> params{{"w", w.data(), g.data(), 2}};
  auto loss = [&] { return w[0] * w[0] + std::sin(w[1]); };
  auto right = [&] {
    g[0] = 2 * w[0];
    g[1] = std::cos(w[1]);
  };
  auto wrong = [&] {
    right();
    g[1] *= 1.01;
  };
  CHECK(grad_check(loss, right, params).passed());
  CHECK_FALSE(grad_check(loss, wrong, params).passed());
}

TEST_CASE("grad_check shrinks the step across a kink") {
  // |w| near 0: probes at +-1e-5 straddle the kink, smaller steps do not.
  std::vector<double> w{4e-6};
  std::vector<double> g(1);
  std::vector<ParamRef> params{{"w", w.data(), g.data(), 1}};
  auto loss = [&](std::size_t, std::size_t) { return LossProbe{std::abs(w[0]), w[0] > 0.0 ? 1u : 0u}; };
  auto grads = [&] { g[0] = 1.0; };
  const auto report = grad_check(loss, grads, params);
  CHECK(report.passed());
  CHECK(report.entries[0].refined == 1);
  CHECK(report.entries[0].unresolved == 0);
}
