#include "csw/train_eval.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "csw/error.hpp"
#include "csw/rng.hpp"

namespace csw {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(v.begin(), mid);
  return 0.5 * (lower + upper);
}

double label_value(Label l) { return l == Label::kStego ? 1.0 : 0.0; }

EvalReport evaluate_refs(const CswModel& model, const std::vector<const Example*>& examples, double threshold) {
  if (examples.empty()) throw Error(ErrorCode::kEmptySplit, "nothing to evaluate");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::vector<double> probs;
  std::vector<std::string> paths;
  probs.reserve(examples.size());
  for (const Example* e : examples) {
    const Verdict v = model.predict(e->clip, threshold);
    probs.push_back(v.probability);
    paths.push_back(e->path);
    if (e->label == Label::kStego) {
      (v.stego ? tp : fn)++;
    } else {
      (v.stego ? fp : tn)++;
    }
  }
  EvalReport r = make_report(tp, fp, fn, tn);
  r.threshold = threshold;
  r.probabilities = std::move(probs);
  r.paths = std::move(paths);
  return r;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

// ---------------------------------------------------------------------------
// Hyper-parameters

void validate_hyper_params(const HyperParams& h) {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::kConfig, "hyper-parameters: " + why); };
  if (!(h.learning_rate >= 0.0) || !std::isfinite(h.learning_rate)) fail("learning_rate must be >= 0");
  if (h.batch_size == 0) fail("batch_size must be >= 1");
  if (!(h.dropout >= 0.0 && h.dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(h.lambda >= 0.0) || !std::isfinite(h.lambda)) fail("lambda must be >= 0");
  if (h.epochs == 0) fail("epochs must be >= 1");
  if (!(h.validation_fraction >= 0.0 && h.validation_fraction < 1.0)) fail("validation_fraction must lie in [0, 1)");
  if (!(h.time_budget_seconds >= 0.0)) fail("time_budget_seconds must be >= 0");
}

HyperParams parse_hyper_params(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "hyper-parameters must be a JSON object");
  HyperParams h;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "learning_rate") h.learning_rate = value.get<double>();
      else if (key == "batch_size") h.batch_size = value.get<std::size_t>();
      else if (key == "dropout") h.dropout = value.get<double>();
      else if (key == "lambda") h.lambda = value.get<double>();
      else if (key == "epochs") h.epochs = value.get<std::size_t>();
      else if (key == "patience") h.patience = value.get<std::size_t>();
      else if (key == "validation_fraction") h.validation_fraction = value.get<double>();
      else if (key == "seed") h.seed = value.get<std::uint64_t>();
      else if (key == "time_budget_seconds") h.time_budget_seconds = value.get<double>();
      else if (key == "full_train_eval") h.full_train_eval = value.get<bool>();
      else throw Error(ErrorCode::kConfig, "unknown hyper-parameter \"" + key + "\"");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("hyper-parameters: ") + e.what());
  }
  validate_hyper_params(h);
  return h;
}

json to_json(const HyperParams& h) {
  return {{"learning_rate", h.learning_rate},
          {"batch_size", h.batch_size},
          {"dropout", h.dropout},
          {"lambda", h.lambda},
          {"epochs", h.epochs},
          {"patience", h.patience},
          {"validation_fraction", h.validation_fraction},
          {"seed", h.seed},
          {"time_budget_seconds", h.time_budget_seconds},
          {"full_train_eval", h.full_train_eval}};
}

json to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch},
          {"mean_loss", e.mean_loss},
          {"median_loss", e.median_loss},
          {"train_accuracy", e.train_accuracy},
          {"full_train_accuracy", optional_json(e.full_train_accuracy)},
          {"validation_accuracy", optional_json(e.validation_accuracy)},
          {"seconds", e.seconds}};
}

json to_json(const TrainHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs) epochs.push_back(to_json(e));
  return {{"step_loss", h.step_loss},
          {"epochs", epochs},
          {"steps_per_epoch", h.steps_per_epoch},
          {"best_epoch", h.best_epoch},
          {"best_validation_accuracy", optional_json(h.best_validation_accuracy)},
          {"stop_reason", h.stop_reason},
          {"total_seconds", h.total_seconds}};
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const std::vector<Example>& train_set, const ArchConfig& arch, const HyperParams& hyper,
                  const EpochCallback& on_epoch) {
  validate_hyper_params(hyper);
  validate_arch_config(arch);
  if (train_set.empty()) throw Error(ErrorCode::kEmptySplit, "the train split is empty");

  // Per-class validation carve-out so both halves stay balanced.
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < train_set.size(); ++i) by_class[static_cast<std::size_t>(train_set[i].label)].push_back(i);
  if (by_class[0].empty() || by_class[1].empty()) {
    throw Error(ErrorCode::kEmptySplit, "the train split needs both cover and stego clips");
  }
  Rng split_rng(derive_seed(hyper.seed, 0x5A11u));
  std::vector<std::size_t> fit, held_out;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), split_rng);
    auto n_val = static_cast<std::size_t>(std::llround(hyper.validation_fraction * static_cast<double>(members.size())));
    n_val = std::min(n_val, members.size() - 1);
    held_out.insert(held_out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    fit.insert(fit.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  std::sort(fit.begin(), fit.end());
  std::sort(held_out.begin(), held_out.end());
  std::vector<const Example*> val_refs, fit_refs;
  for (auto i : held_out) val_refs.push_back(&train_set[i]);
  for (auto i : fit) fit_refs.push_back(&train_set[i]);

  CswModel model = CswModel::build(arch, derive_seed(hyper.seed, 0x1A17u));
  for (const Example* e : fit_refs) {
    if (e->clip.size() < model.min_clip_frames()) throw ClipTooShort(e->clip.size(), model.min_clip_frames());
  }
  Rng shuffle_rng(derive_seed(hyper.seed, 0x5F1Eu));
  Rng dropout_rng(derive_seed(hyper.seed, 0xD50Fu));
  nn::AdamState adam;
  adam.learning_rate = hyper.learning_rate;
  const auto params = model.parameters();

  ForwardOptions fo;
  ForwardCache cache;  // reused so its large buffers are allocated once
  fo.mode = nn::Mode::kTrain;
  fo.dropout = hyper.dropout;
  fo.rng = &dropout_rng;
  const double threshold = arch.threshold;

  TrainResult result{model, {}};
  TrainHistory& history = result.history;
  history.steps_per_epoch = (fit.size() + hyper.batch_size - 1) / hyper.batch_size;
  history.stop_reason = "epochs";
  std::size_t since_best = 0;
  const auto start = Clock::now();
  bool out_of_time = false;

  std::vector<std::size_t> order(fit.size());
  std::vector<NormalizedClip> batch;
  std::vector<const NormalizedClip*> batch_refs;
  std::vector<double> labels;
  for (std::size_t epoch = 1; epoch <= hyper.epochs && !out_of_time; ++epoch) {
    const auto epoch_start = Clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::vector<double> epoch_loss;
    std::size_t correct = 0, seen = 0;
    for (std::size_t b = 0; b < order.size(); b += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), b + hyper.batch_size);
      batch.clear();
      labels.clear();
      for (std::size_t i = b; i < end; ++i) {
        const Example* e = fit_refs[order[i]];
        batch.push_back(model.prepare(e->clip));
        labels.push_back(label_value(e->label));
      }
      batch_refs.clear();
      for (const auto& c : batch) batch_refs.push_back(&c);

      model.forward_cached(batch_refs, fo, cache);
      const nn::LossValue loss = model.loss(cache, labels, hyper.lambda);
      model.zero_grad();
      model.backward(cache, labels, hyper.lambda);
      model.commit_running_stats(cache);
      try {
        nn::adam_step(params, adam);
      } catch (const Error& e) {
        throw Error(e.code(), std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                                  std::to_string(b / hyper.batch_size + 1) + " (loss " + std::to_string(loss.total) +
                                  ")");
      }
      history.step_loss.push_back(loss.total);
      epoch_loss.push_back(loss.total);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool stego = cache.probabilities(static_cast<nn::Index>(i)) >= threshold;
        correct += (stego == (labels[i] == 1.0)) ? 1 : 0;
      }
      seen += labels.size();
      if (hyper.time_budget_seconds > 0.0 && seconds_since(start) > hyper.time_budget_seconds) {
        out_of_time = true;
        break;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = std::accumulate(epoch_loss.begin(), epoch_loss.end(), 0.0) / static_cast<double>(epoch_loss.size());
    rec.median_loss = median(epoch_loss);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    if (hyper.full_train_eval) rec.full_train_accuracy = evaluate_refs(model, fit_refs, threshold).accuracy;
    if (!val_refs.empty()) rec.validation_accuracy = evaluate_refs(model, val_refs, threshold).accuracy;
    rec.seconds = seconds_since(epoch_start);
    history.epochs.push_back(rec);

    // Without a validation set the latest weights are kept.
    const bool improved = !rec.validation_accuracy || !history.best_validation_accuracy ||
                          *rec.validation_accuracy > *history.best_validation_accuracy;
    if (improved) {
      result.model = model;
      history.best_epoch = epoch;
      history.best_validation_accuracy = rec.validation_accuracy;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (out_of_time) {
      history.stop_reason = "time_budget";
      break;
    }
    if (on_epoch && !on_epoch(rec)) {
      history.stop_reason = "callback";
      break;
    }
    if (hyper.patience > 0 && since_best >= hyper.patience) {
      history.stop_reason = "early_stop";
      break;
    }
  }
  history.total_seconds = seconds_since(start);
  result.model.zero_grad();
  return result;
}

TrainResult train(const DatasetManifest& manifest, const ArchConfig& arch, const HyperParams& hyper,
                  const std::filesystem::path& checkpoint, const ManifestFilter& filter, const EpochCallback& on_epoch) {
  const auto examples = load_examples(manifest, Split::kTrain, filter);
  TrainResult result = train(examples, arch, hyper, on_epoch);
  json meta = {{"hyper_params", to_json(hyper)}, {"history", to_json(result.history)}};
  meta["history"].erase("step_loss");
  save_checkpoint(result.model, checkpoint, meta);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport make_report(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  EvalReport r;
  r.tp = tp;
  r.fp = fp;
  r.fn = fn;
  r.tn = tn;
  const std::size_t total = tp + fp + fn + tn;
  r.accuracy = total ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
  if (fp + tn > 0) r.fp_rate = static_cast<double>(fp) / static_cast<double>(fp + tn);
  if (fn + tp > 0) r.fn_rate = static_cast<double>(fn) / static_cast<double>(fn + tp);
  return r;
}

json to_json(const EvalReport& r, bool with_probabilities) {
  json j = {{"tp", r.tp},
            {"fp", r.fp},
            {"fn", r.fn},
            {"tn", r.tn},
            {"total", r.total()},
            {"accuracy", r.accuracy},
            {"fp_rate", optional_json(r.fp_rate)},
            {"fn_rate", optional_json(r.fn_rate)},
            {"threshold", r.threshold}};
  if (with_probabilities) {
    json clips = json::array();
    for (std::size_t i = 0; i < r.probabilities.size(); ++i) {
      clips.push_back({{"path", i < r.paths.size() ? r.paths[i] : ""}, {"p", r.probabilities[i]}});
    }
    j["clips"] = std::move(clips);
  }
  return j;
}

EvalReport evaluate(const CswModel& model, const std::vector<Example>& examples, double threshold) {
  std::vector<const Example*> refs;
  refs.reserve(examples.size());
  for (const auto& e : examples) refs.push_back(&e);
  return evaluate_refs(model, refs, threshold);
}

void export_features(const CswModel& model, const std::vector<Example>& examples, const std::filesystem::path& csv) {
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + csv.string() + " for writing");
  out << "label,embedding_rate";
  for (std::size_t i = 0; i < model.fused_dim(); ++i) out << ",o" << i;
  out << '\n';
  char buf[32];
  for (const auto& e : examples) {
    const auto o = model.forward(model.prepare(e.clip)).features;
    out << (e.label == Label::kStego ? 1 : 0);
    std::snprintf(buf, sizeof buf, ",%.17g", e.embedding_rate);
    out << buf;
    for (nn::Index i = 0; i < o.size(); ++i) {
      std::snprintf(buf, sizeof buf, ",%.17g", o(i));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + csv.string());
}

// ---------------------------------------------------------------------------
// Latency

json to_json(const LatencyReport& r) {
  json entries = json::array();
  for (const auto& e : r.entries) {
    entries.push_back({{"frames", e.frames},
                       {"samples", e.samples},
                       {"mean_ms", e.mean_ms},
                       {"sd_ms", e.sd_ms},
                       {"median_ms", e.median_ms},
                       {"min_ms", e.min_ms}});
  }
  return {{"entries", entries}};
}

LatencyReport bench_latency(const CswModel& model, const std::vector<std::size_t>& lengths, std::size_t repetitions,
                            std::size_t warmup, std::uint64_t seed) {
  if (repetitions < 30) throw Error(ErrorCode::kInvalidArgument, "latency benchmarks need at least 30 repetitions");
  LatencyReport report;
  Rng rng(derive_seed(seed, 0xBE7Cu));
  for (std::size_t n : lengths) {
    if (n < model.min_clip_frames()) throw ClipTooShort(n, model.min_clip_frames());
    CodewordClip clip;
    clip.frames.resize(n);
    for (auto& f : clip.frames) {
      for (int j = 0; j < kSlots; ++j) {
        const auto size = clip.codebook_sizes[static_cast<std::size_t>(j)];
        f[j] = static_cast<std::uint16_t>(std::min<double>(size - 1, std::floor(uniform01(rng) * size)));
      }
    }
    volatile double sink = 0.0;
    for (std::size_t i = 0; i < warmup; ++i) sink = sink + model.predict(clip).probability;
    std::vector<double> ms;
    ms.reserve(repetitions);
    for (std::size_t i = 0; i < repetitions; ++i) {
      const auto t0 = Clock::now();
      sink = sink + model.predict(clip).probability;
      ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
    }
    LatencyEntry e;
    e.frames = n;
    e.samples = ms.size();
    e.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
    double ss = 0.0;
    for (double v : ms) ss += (v - e.mean_ms) * (v - e.mean_ms);
    e.sd_ms = std::sqrt(ss / static_cast<double>(ms.size() - 1));
    e.median_ms = median(ms);
    e.min_ms = *std::min_element(ms.begin(), ms.end());
    report.entries.push_back(e);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

std::size_t parameter_count(CswModel& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) n += p.size;
  return n;
}

std::vector<AblationRow> ablate(const DatasetManifest& manifest, const std::string& variants, const ArchConfig& base,
                                const HyperParams& hyper, const ManifestFilter& filter) {
  const auto train_set = load_examples(manifest, Split::kTrain, filter);
  const auto test_set = load_examples(manifest, Split::kTest, filter);
  std::vector<AblationRow> rows;
  for (char v : variants) {
    const ArchConfig arch = ablation_variant(v, base);
    TrainResult r = train(train_set, arch, hyper);
    AblationRow row;
    row.variant = v;
    row.description = describe_variant(v);
    row.fused_input_dim = r.model.fused_input_dim();
    row.parameters = parameter_count(r.model);
    row.test_accuracy = evaluate(r.model, test_set, arch.threshold).accuracy;
    row.train_seconds = r.history.total_seconds;
    rows.push_back(row);
  }
  return rows;
}

json to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"variant", std::string(1, r.variant)},
                   {"description", r.description},
                   {"m", r.fused_input_dim},
                   {"parameters", r.parameters},
                   {"test_accuracy", r.test_accuracy},
                   {"train_seconds", r.train_seconds}});
  }
  return out;
}

}  // namespace csw
