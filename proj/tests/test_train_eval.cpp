#include <doctest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include "csw/cover_model.hpp"
#include "csw/qim.hpp"
#include "csw/train_eval.hpp"
#include "support.hpp"

using namespace csw;
using test::code_of;

namespace {

ArchConfig small_arch() {
  ArchConfig c;
  c.conv1_kernels = 8;
  c.conv2_kernels = 6;
  c.skip_rows = 4;
  c.fused_dim = 8;
  return c;
}

std::vector<Example> toy_set(std::size_t per_class, std::size_t frames, std::uint64_t seed) {
  const auto model = make_cover_model(kDefaultCodebookSizes, 0.1, seed);
  const auto key = make_qim_key(kDefaultCodebookSizes, 3, seed + 1);
  std::vector<Example> out;
  for (std::size_t i = 0; i < per_class; ++i) {
    out.push_back({gen_cover(model, frames, seed * 1000 + i), Label::kCover, 0.0, "c" + std::to_string(i)});
    const auto cover = gen_cover(model, frames, seed * 1000 + per_class + i);
    out.push_back({qim_embed_random(cover, 1.0, key, i).stego, Label::kStego, 1.0, "s" + std::to_string(i)});
  }
  return out;
}

std::vector<double> flat_params(CswModel& m) {
  std::vector<double> v;
  for (const auto& p : m.parameters()) v.insert(v.end(), p.value, p.value + p.size);
  return v;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("report arithmetic") {
  const auto r = make_report(9, 1, 2, 8);
  CHECK(r.total() == 20);
  CHECK(r.accuracy == 17.0 / 20.0);
  CHECK(*r.fp_rate == 1.0 / 9.0);
  CHECK(*r.fn_rate == 2.0 / 11.0);
  const auto covers_only = make_report(0, 3, 0, 7);
  CHECK(covers_only.fp_rate.has_value());
  CHECK_FALSE(covers_only.fn_rate.has_value());
  const auto j = to_json(covers_only);
  CHECK(j["fn_rate"].is_null());
}

TEST_CASE("a model biased to stego has no negatives") {
  auto model = CswModel::build(small_arch(), 1);
  model.detection().weight.setZero();
  model.detection().bias.setConstant(10.0);
  const auto r = evaluate(model, toy_set(5, 20, 3), 0.5);
  CHECK(r.fn == 0);
  CHECK(r.tn == 0);
  CHECK(r.tp == 5);
  CHECK(r.fp == 5);
  CHECK(r.probabilities.size() == 10);
  CHECK(code_of([&] { evaluate(model, {}, 0.5); }) == ErrorCode::kEmptySplit);
}

TEST_CASE("evaluation ignores test-set order") {
  const auto model = CswModel::build(small_arch(), 2);
  auto set = toy_set(6, 20, 4);
  const auto a = evaluate(model, set, 0.5);
  std::reverse(set.begin(), set.end());
  const auto b = evaluate(model, set, 0.5);
  CHECK(a.tp == b.tp);
  CHECK(a.tn == b.tn);
  CHECK(a.accuracy == b.accuracy);
}

TEST_CASE("zero learning rate leaves the weights alone") {
  const auto set = toy_set(8, 20, 5);
  HyperParams h;
  h.learning_rate = 0.0;
  h.batch_size = 16;
  h.dropout = 0.0;
  h.epochs = 3;
  h.patience = 0;
  h.validation_fraction = 0.0;
  // train() seeds its weights the same way.
  auto initial = CswModel::build(small_arch(), derive_seed(h.seed, 0x1A17u));
  auto result = train(set, small_arch(), h);
  CHECK(flat_params(result.model) == flat_params(initial));
  REQUIRE(result.history.epochs.size() == 3);
  for (const auto& e : result.history.epochs) {
    CHECK(e.mean_loss == doctest::Approx(result.history.epochs[0].mean_loss).epsilon(1e-12));
  }
}

TEST_CASE("training is deterministic for a seed") {
  const auto set = toy_set(8, 20, 6);
  HyperParams h;
  h.batch_size = 4;
  h.epochs = 2;
  h.validation_fraction = 0.25;
  const auto a = train(set, small_arch(), h);
  const auto b = train(set, small_arch(), h);
  CHECK(a.history.step_loss == b.history.step_loss);
  CHECK(a.history.steps_per_epoch * 2 == a.history.step_loss.size());
  h.seed = 2;
  CHECK(train(set, small_arch(), h).history.step_loss != a.history.step_loss);
}

TEST_CASE("training rejects unusable sets and hyper-parameters") {
  auto set = toy_set(3, 20, 7);
  CHECK(code_of([] { train({}, ArchConfig{}, HyperParams{}); }) == ErrorCode::kEmptySplit);
  std::erase_if(set, [](const Example& e) { return e.label == Label::kStego; });
  CHECK(code_of([&] { train(set, small_arch(), HyperParams{}); }) == ErrorCode::kEmptySplit);

  CHECK(code_of([] { parse_hyper_params({{"dropout", 1.0}}); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_hyper_params({{"batch_size", 0}}); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_hyper_params({{"epochs", 0}}); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_hyper_params({{"learning_rate", -1}}); }) == ErrorCode::kConfig);
  CHECK(code_of([] { parse_hyper_params({{"momentum", 0.9}}); }) == ErrorCode::kConfig);
  const auto h = parse_hyper_params(nlohmann::json::object());
  CHECK(h.learning_rate == 1e-3);
  CHECK(h.batch_size == 256);
  CHECK(h.dropout == 0.5);
  CHECK(parse_hyper_params(to_json(h)).lambda == h.lambda);
}

TEST_CASE("epoch callback can stop training") {
  HyperParams h;
  h.batch_size = 8;
  h.epochs = 10;
  h.patience = 0;
  std::size_t calls = 0;
  const auto r = train(toy_set(4, 20, 8), small_arch(), h, [&](const EpochRecord&) { return ++calls < 2; });
  CHECK(calls == 2);
  CHECK(r.history.epochs.size() == 2);
}

TEST_CASE("feature export shape, determinism and zero model") {
  test::TempDir dir;
  const auto set = toy_set(50, 20, 9);
  auto model = CswModel::build({}, 3);
  export_features(model, set, dir / "a.csv");
  export_features(model, set, dir / "b.csv");
  const auto text = slurp(dir / "a.csv");
  CHECK(text == slurp(dir / "b.csv"));

  std::istringstream lines(text);
  std::string line;
  std::size_t rows = 0;
  std::getline(lines, line);  // header
  while (std::getline(lines, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') + 1 == 2 + 64);
    ++rows;
  }
  CHECK(rows == 100);

  for (auto& p : model.parameters()) std::fill(p.value, p.value + p.size, 0.0);
  export_features(model, set, dir / "z.csv");
  std::istringstream zl(slurp(dir / "z.csv"));
  std::getline(zl, line);
  while (std::getline(zl, line)) {
    std::istringstream cells(line);
    std::string cell;
    int col = 0;
    while (std::getline(cells, cell, ',')) {
      if (col++ >= 2) CHECK(std::stod(cell) == 0.0);
    }
  }
}

TEST_CASE("latency report") {
  const auto model = CswModel::build(short_clip_config(), 1);
  const auto r = bench_latency(model, {10, 200}, 30, 2);
  REQUIRE(r.entries.size() == 2);
  for (const auto& e : r.entries) {
    CHECK(e.samples == 30);
    CHECK(e.sd_ms >= 0.0);
    CHECK(e.min_ms <= e.median_ms);
  }
  CHECK(r.entries[1].median_ms > r.entries[0].median_ms);
  CHECK(code_of([&] { bench_latency(model, {10}, 29); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { bench_latency(model, {7}, 30); }) == ErrorCode::kClipTooShort);
}

TEST_CASE("train history serializes per epoch") {
  EpochRecord e;
  e.epoch = 3;
  e.validation_accuracy = 0.75;
  const auto j = to_json(e);
  CHECK(j["epoch"] == 3);
  CHECK(j["validation_accuracy"] == 0.75);
}
