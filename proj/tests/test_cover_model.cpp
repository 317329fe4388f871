#include <doctest.h>

#include <cmath>

#include "csw/cover_model.hpp"
#include "support.hpp"

using namespace csw;
using test::code_of;

TEST_CASE("cover model rows are probability vectors") {
  const auto m = make_cover_model(kDefaultCodebookSizes, 0.1, 3);
  CHECK_NOTHROW(validate_cover_model(m));
  CHECK(m.transitions[0].rows() == 128);
  CHECK(m.transitions[1].rows() == 4 * 32);
  CHECK(m.transitions[2].rows() == 4 * 32);
  for (const auto& t : m.transitions) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < t.states; ++c) {
        CHECK(t(r, c) >= 0.0);
        s += t(r, c);
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("validate_cover_model rejects broken tables") {
  auto m = make_cover_model({8, 4, 4}, 0.5, 1);
  m.transitions[1](0, 0) += 0.01;
  CHECK(code_of([&] { validate_cover_model(m); }) == ErrorCode::kConfig);
  CHECK(code_of([] { make_cover_model(kDefaultCodebookSizes, 0.0, 1); }) == ErrorCode::kConfig);
  CHECK(code_of([] { make_cover_model(kDefaultCodebookSizes, -1.0, 1); }) == ErrorCode::kConfig);
}

TEST_CASE("quartile buckets") {
  CHECK(intra_bucket(0, 128) == 0);
  CHECK(intra_bucket(31, 128) == 0);
  CHECK(intra_bucket(32, 128) == 1);
  CHECK(intra_bucket(127, 128) == 3);
  CHECK(intra_bucket(7, 32) == 0);
  CHECK(intra_bucket(8, 32) == 1);
  CHECK(intra_bucket(31, 32) == 3);
}

TEST_CASE("absorbing chain repeats the initial frame") {
  const CodebookSizes sizes{8, 4, 4};
  auto m = make_cover_model(sizes, 1.0, 1);
  for (auto& t : m.transitions) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t c = 0; c < t.states; ++c) t(r, c) = (r % t.states == c) ? 1.0 : 0.0;
    }
  }
  m.initial_frame = CodewordFrame{{5, 2, 3}};
  const auto clip = gen_cover(m, 200, 9);
  for (const auto& f : clip.frames) CHECK(f == *m.initial_frame);
}

TEST_CASE("gen_cover is deterministic and valid") {
  const auto m = make_cover_model(kDefaultCodebookSizes, 0.1, 2);
  const auto a = gen_cover(m, 1000, 5);
  CHECK(a == gen_cover(m, 1000, 5));
  CHECK(a != gen_cover(m, 1000, 6));
  CHECK(a.size() == 1000);
  CHECK_NOTHROW(validate_clip(a));
  CHECK(code_of([&] { gen_cover(m, 0, 1); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("empirical slot-1 transitions converge to the table") {
  const auto m = make_cover_model(kDefaultCodebookSizes, 0.05, 4);
  const auto clip = gen_cover(m, 100000, 1);
  const std::size_t n = 128;
  std::vector<double> counts(n * n, 0.0);
  std::vector<double> visits(n, 0.0);
  for (std::size_t t = 1; t < clip.size(); ++t) {
    counts[clip.frames[t - 1][0] * n + clip.frames[t][0]] += 1.0;
    visits[clip.frames[t - 1][0]] += 1.0;
  }
  // Rows the chain barely visits carry no information about convergence.
  int checked = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (visits[r] < 500) continue;
    // E|p_hat - p| <= sqrt(p(1-p)/v) per cell; allow twice the summed bound.
    double tv = 0.0, bound = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double p = m.transitions[0](r, c);
      tv += std::abs(counts[r * n + c] / visits[r] - p);
      bound += std::sqrt(p * (1.0 - p) / visits[r]);
    }
    CHECK(tv <= 2.0 * bound);
    CHECK(0.5 * tv <= 0.15);
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("slot 2 depends on the bucket of slot 1") {
  // Transition rows for different buckets are independent draws, so the
  // conditional distribution of a2 differs across a1 buckets.
  const auto m = make_cover_model(kDefaultCodebookSizes, 0.1, 8);
  const auto clip = gen_cover(m, 50000, 2);
  std::array<std::array<double, 32>, 4> hist{};
  for (const auto& f : clip.frames) hist[static_cast<std::size_t>(intra_bucket(f[0], 128))][f[1]] += 1.0;
  double max_tv = 0.0;
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = a + 1; b < 4; ++b) {
      double sa = 0.0, sb = 0.0, tv = 0.0;
      for (std::size_t c = 0; c < 32; ++c) {
        sa += hist[a][c];
        sb += hist[b][c];
      }
      if (sa < 100 || sb < 100) continue;
      for (std::size_t c = 0; c < 32; ++c) tv += std::abs(hist[a][c] / sa - hist[b][c] / sb);
      max_tv = std::max(max_tv, 0.5 * tv);
    }
  }
  CHECK(max_tv > 0.1);
}
