#include <doctest.h>

#include "csw/csw_model.hpp"
#include "support.hpp"

using namespace csw;
using test::code_of;

namespace {

// Small enough for exhaustive sweeps and finite differences.
ArchConfig tiny_config() {
  ArchConfig c;
  c.conv1_kernels = 4;
  c.conv2_kernels = 3;
  c.skip_rows = 2;
  c.fused_dim = 5;
  return c;
}

// m from the widths and counts alone.
std::size_t m_formula(const ArchConfig& c) {
  return c.n_channels() * static_cast<std::size_t>(c.conv2_kernels * c.k_conv) +
         (c.skip_enabled ? static_cast<std::size_t>(c.skip_rows * c.k_skip) : 0);
}

void zero_all(CswModel& model) {
  for (auto& p : model.parameters()) std::fill(p.value, p.value + p.size, 0.0);
}

}  // namespace

TEST_CASE("default dimensions match the published network") {
  const auto model = CswModel::build({}, 1);
  CHECK(model.fused_input_dim() == 448);
  CHECK(model.fused_dim() == 64);
  CHECK(m_formula(ArchConfig{}) == 448);
  CHECK(model.min_clip_frames() == 12);
}

TEST_CASE("ablation dimensions follow the m formula") {
  CHECK(CswModel::build(ablation_variant('b'), 1).fused_input_dim() == 384);
  CHECK(m_formula(ablation_variant('b')) == 384);
  const auto j = ablation_variant('j');
  CHECK(j.window_widths == std::vector<int>{1, 3});
  CHECK(CswModel::build(j, 1).fused_input_dim() == 320);
  CHECK(m_formula(j) == 320);
  for (char v : kAblationVariants) {
    const auto c = ablation_variant(v);
    CHECK_NOTHROW(validate_arch_config(c));
    CHECK(CswModel::build(c, 1).fused_input_dim() == c.fused_input_dim());
  }
  // Disabling the skip path removes exactly l_s * k_skip.
  ArchConfig with, without;
  without.skip_enabled = false;
  CHECK(with.fused_input_dim() - without.fused_input_dim() == static_cast<std::size_t>(with.skip_rows * with.k_skip));
}

TEST_CASE("channel shapes chain through both convolutions") {
  const auto model = CswModel::build({}, 1);
  const auto s = model.shape(1000);
  REQUIRE(s.channels.size() == 3);
  const ArchConfig c;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto lc = 1000 - c.window_widths[k] + 1;
    const auto le = lc - c.conv2_widths[k] + 1;
    REQUIRE(s.channels[k].layer_lengths.size() == 2);
    CHECK(s.channels[k].layer_lengths[0] == lc);
    CHECK(s.channels[k].layer_lengths[1] == le);
    CHECK(s.channels[k].pooled == 128);
  }
  CHECK(s.channels[2].layer_lengths[0] == 996);
  CHECK(s.channels[2].layer_lengths[1] == 990);
  CHECK(s.fused_input_dim == 448);
}

TEST_CASE("short clips are rejected below the minimum") {
  const auto model = CswModel::build({}, 1);
  CHECK_NOTHROW(model.predict(test::random_clip(12, 1)));
  try {
    model.predict(test::random_clip(11, 1));
    FAIL("accepted an 11-frame clip");
  } catch (const ClipTooShort& e) {
    CHECK(e.frames() == 11);
    CHECK(e.minimum() == 12);
  }
  const auto short_model = CswModel::build(short_clip_config(), 1);
  // Widest channel: (N - 5 + 1) - 3 + 1 >= 2 positions for 2-max pooling.
  CHECK(short_model.min_clip_frames() == 8);
  CHECK_NOTHROW(short_model.predict(test::random_clip(10, 1)));
  CHECK_NOTHROW(short_model.predict(test::random_clip(8, 1)));
  CHECK(code_of([&] { short_model.predict(test::random_clip(7, 1)); }) == ErrorCode::kClipTooShort);
}

TEST_CASE("classify treats an exact tie as stego") {
  CHECK(classify(0.7, 0.5).stego);
  CHECK(classify(0.5, 0.5).stego);
  CHECK_FALSE(classify(0.49, 0.5).stego);
}

TEST_CASE("raising the threshold never turns cover into stego") {
  const auto model = CswModel::build({}, 3);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto clip = test::random_clip(40, s);
    bool previous = true;
    for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      const bool stego = model.predict(clip, t).stego;
      CHECK((previous || !stego));
      previous = stego;
    }
  }
}

TEST_CASE("zero weights give probability one half") {
  auto model = CswModel::build({}, 2);
  zero_all(model);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto out = model.forward(model.prepare(test::random_clip(30, s)));
    CHECK(out.probability == 0.5);
    CHECK(out.features.isZero(0.0));
  }
}

TEST_CASE("build and forward are deterministic") {
  const auto a = CswModel::build({}, 5);
  const auto b = CswModel::build({}, 5);
  const auto clip = test::random_clip(100, 4);
  CHECK(a.forward(a.prepare(clip)).probability == b.forward(b.prepare(clip)).probability);
  CHECK(a.forward(a.prepare(clip)).probability == a.forward(a.prepare(clip)).probability);
  const auto c = CswModel::build({}, 6);
  CHECK(c.forward(c.prepare(clip)).probability != a.forward(a.prepare(clip)).probability);
}

TEST_CASE("batched forward agrees with single-clip forward") {
  const auto model = CswModel::build(tiny_config(), 7);
  std::vector<NormalizedClip> clips;
  for (std::size_t n : {12u, 20u, 33u, 12u}) clips.push_back(model.prepare(test::random_clip(n, n)));
  std::vector<const NormalizedClip*> refs;
  for (const auto& c : clips) refs.push_back(&c);
  const auto batch = model.forward_batch(refs);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto one = model.forward(clips[i]);
    CHECK(batch[i].probability == doctest::Approx(one.probability).epsilon(1e-12));
    CHECK((batch[i].features - one.features).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("dropout rate one is rejected and zero is a no-op") {
  const auto model = CswModel::build(tiny_config(), 8);
  const auto clip = model.prepare(test::random_clip(20, 1));
  const NormalizedClip* refs[] = {&clip, &clip};
  Rng rng(1);
  ForwardOptions opts{nn::Mode::kTrain, 1.0, &rng};
  CHECK(code_of([&] { model.forward_cached(refs, opts); }) == ErrorCode::kConfig);
  opts.dropout = 0.0;
  const auto with = model.forward_cached(refs, opts);
  const auto without = model.forward_cached(refs, ForwardOptions{nn::Mode::kTrain, 0.0, nullptr});
  CHECK(with.z_used == with.z);
  CHECK(with.probabilities == without.probabilities);
}

TEST_CASE("train forward equals infer forward when running stats match the batch") {
  auto model = CswModel::build(tiny_config(), 9);
  const auto clip = model.prepare(test::random_clip(25, 2));
  const NormalizedClip* refs[] = {&clip};
  const auto train = model.forward_cached(refs, ForwardOptions{nn::Mode::kTrain, 0.0, nullptr});
  // Install the batch statistics as running statistics: mean as is, variance
  // biased (what the train pass normalized with).
  auto install = [](std::vector<CswModel::Channel>& paths, const std::vector<ForwardCache::Path>& cached) {
    for (std::size_t p = 0; p < paths.size(); ++p) {
      for (std::size_t l = 0; l < paths[p].norms.size(); ++l) {
        auto& bn = paths[p].norms[l];
        bn.running_mean = cached[p].layers[l].bn.mean;
        bn.running_var = cached[p].layers[l].bn.var;
      }
    }
  };
  install(model.channels(), train.channels);
  install(model.skips(), train.skips);
  const auto infer = model.forward(clip);
  CHECK(infer.probability == doctest::Approx(train.probabilities(0)).epsilon(1e-12));
}

TEST_CASE("gradient check on a tiny model") {
  auto model = CswModel::build(tiny_config(), 10);
  std::vector<NormalizedClip> clips;
  for (std::uint64_t s = 0; s < 4; ++s) clips.push_back(model.prepare(test::random_clip(20, s)));
  std::vector<const NormalizedClip*> refs;
  for (const auto& c : clips) refs.push_back(&c);
  const std::vector<double> labels{0, 1, 1, 0};
  const auto report = model.grad_check(refs, labels, 1e-3);
  CHECK(report.passed());
  CHECK(report.max_rel_error() < 1e-4);
}

TEST_CASE("arch config JSON round trip and validation") {
  ArchConfig c = ablation_variant('h');
  c.threshold = 0.3;
  const auto back = parse_arch_config(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(arch_hash(back) == arch_hash(c));
  ArchConfig other = c;
  other.threshold = 0.6;
  CHECK(arch_hash(other) == arch_hash(c));
  other.conv2_kernels = 32;
  CHECK(arch_hash(other) != arch_hash(c));

  CHECK(code_of([] { parse_arch_config({{"no_such_field", 1}}); }) == ErrorCode::kConfig);
  ArchConfig bad;
  bad.window_widths.clear();
  bad.conv2_widths.clear();
  CHECK(code_of([&] { CswModel::build(bad, 1); }) == ErrorCode::kConfig);
  bad = ArchConfig{};
  bad.conv2_widths = {3, 5};
  CHECK(code_of([&] { CswModel::build(bad, 1); }) == ErrorCode::kConfig);
}

TEST_CASE("checkpoint round trip reproduces outputs exactly") {
  test::TempDir dir;
  auto model = CswModel::build({}, 11);
  // Non-default running statistics so they are known to be stored.
  model.channels()[1].norms[0].running_mean.setConstant(0.25);
  model.skips()[0].norms[0].running_var.setConstant(3.0);
  save_checkpoint(model, dir / "m.ckpt", {{"note", "x"}});
  const auto loaded = load_checkpoint(dir / "m.ckpt");
  CHECK(loaded.metadata["note"] == "x");
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto clip = test::random_clip(50 + 10 * s, s);
    CHECK(loaded.model.predict(clip).probability == model.predict(clip).probability);
  }
  auto copy = loaded.model;
  const auto a = copy.state();
  const auto b = model.state();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(std::equal(a[i].data, a[i].data + a[i].rows * a[i].cols, b[i].data));
  }
}

TEST_CASE("checkpoint arch mismatch, truncation and corruption") {
  const auto model = CswModel::build(tiny_config(), 12);
  const auto bytes = encode_checkpoint(model);
  const auto same = tiny_config();
  CHECK_NOTHROW(decode_checkpoint(bytes, &same));
  auto other = tiny_config();
  other.fused_dim = 6;
  CHECK(code_of([&] { decode_checkpoint(bytes, &other); }) == ErrorCode::kArchMismatch);

  for (std::size_t n = 0; n < bytes.size(); n += (n < 64 ? 1 : 13)) {
    CHECK(code_of([&] { decode_checkpoint(std::span<const std::uint8_t>(bytes.data(), n)); }) == ErrorCode::kFormat);
  }
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK(code_of([&] { decode_checkpoint(flipped); }) == ErrorCode::kFormat);
  test::TempDir dir;
  CHECK(code_of([&] { load_checkpoint(dir / "absent.ckpt"); }) == ErrorCode::kIo);
}
