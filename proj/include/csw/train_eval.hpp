#pragma once

// Mini-batch training with Adam, confusion-matrix evaluation, feature export
// and single-clip latency benchmarking.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csw/csw_model.hpp"
#include "csw/dataset.hpp"

namespace csw {

struct HyperParams {
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  double dropout = 0.5;
  double lambda = 1e-3;
  std::size_t epochs = 30;
  std::size_t patience = 5;          // epochs without validation gain; 0 = never stop early
  double validation_fraction = 0.1;  // carved from the train split, per class
  std::uint64_t seed = 1;
  double time_budget_seconds = 0.0;  // 0 = unlimited; checked between steps
  bool full_train_eval = false;      // infer-mode accuracy over the train set each epoch
};

/// Throws ConfigError.
void validate_hyper_params(const HyperParams& h);
HyperParams parse_hyper_params(const nlohmann::json& j);
nlohmann::json to_json(const HyperParams& h);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double median_loss = 0.0;
  double train_accuracy = 0.0;  // running mini-batch accuracy (train mode)
  std::optional<double> full_train_accuracy;
  std::optional<double> validation_accuracy;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<double> step_loss;
  std::vector<EpochRecord> epochs;
  std::size_t steps_per_epoch = 0;
  std::size_t best_epoch = 0;
  std::optional<double> best_validation_accuracy;
  std::string stop_reason;  // "epochs", "early_stop", "time_budget"
  double total_seconds = 0.0;
};

nlohmann::json to_json(const EpochRecord& e);
nlohmann::json to_json(const TrainHistory& h);

struct TrainResult {
  CswModel model;  // weights of the best epoch
  TrainHistory history;
};

/// Called after every epoch; return false to stop.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Throws EmptySplit when `train_set` is empty or holds a single class, and
/// NonFiniteGradient with the epoch/step when a gradient blows up.
TrainResult train(const std::vector<Example>& train_set, const ArchConfig& arch, const HyperParams& hyper,
                  const EpochCallback& on_epoch = {});

/// Trains on the manifest's train split and writes the best checkpoint to
/// `checkpoint` (with the history and hyper-parameters as metadata).
TrainResult train(const DatasetManifest& manifest, const ArchConfig& arch, const HyperParams& hyper,
                  const std::filesystem::path& checkpoint, const ManifestFilter& filter = {},
                  const EpochCallback& on_epoch = {});

struct EvalReport {
  std::size_t tp = 0;  // stego flagged as stego
  std::size_t fp = 0;  // cover flagged as stego
  std::size_t fn = 0;
  std::size_t tn = 0;
  double accuracy = 0.0;
  std::optional<double> fp_rate;  // FP / (FP + TN); undefined without covers
  std::optional<double> fn_rate;  // FN / (FN + TP); undefined without stego clips
  double threshold = 0.5;
  std::vector<double> probabilities;
  std::vector<std::string> paths;

  std::size_t total() const noexcept { return tp + fp + fn + tn; }
};

/// Fills the rates and accuracy from the four counts.
EvalReport make_report(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn);
nlohmann::json to_json(const EvalReport& r, bool with_probabilities = false);

/// Infer-mode evaluation; stego is the positive class. Throws EmptySplit.
EvalReport evaluate(const CswModel& model, const std::vector<Example>& examples, double threshold);

/// One row per clip: label (0 cover, 1 stego), embedding rate, O vector.
void export_features(const CswModel& model, const std::vector<Example>& examples, const std::filesystem::path& csv);

struct LatencyEntry {
  std::size_t frames = 0;
  std::size_t samples = 0;
  double mean_ms = 0.0;
  double sd_ms = 0.0;
  double median_ms = 0.0;
  double min_ms = 0.0;
};

struct LatencyReport {
  std::vector<LatencyEntry> entries;
};

nlohmann::json to_json(const LatencyReport& r);

/// Times predict() on random clips of each length. repetitions >= 30;
/// `warmup` runs per length are discarded. Throws ClipTooShort.
LatencyReport bench_latency(const CswModel& model, const std::vector<std::size_t>& lengths, std::size_t repetitions,
                            std::size_t warmup = 5, std::uint64_t seed = 1);

struct AblationRow {
  char variant = 'a';
  std::string description;
  std::size_t fused_input_dim = 0;
  std::size_t parameters = 0;
  double test_accuracy = 0.0;
  double train_seconds = 0.0;
};

/// Trains and evaluates each variant on the same data.
std::vector<AblationRow> ablate(const DatasetManifest& manifest, const std::string& variants, const ArchConfig& base,
                                const HyperParams& hyper, const ManifestFilter& filter = {});
nlohmann::json to_json(const std::vector<AblationRow>& rows);

std::size_t parameter_count(CswModel& model);

}  // namespace csw
