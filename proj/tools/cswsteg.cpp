// Command-line front end. Talks to the toolkit only through the C API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "csw/c_api.h"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// An operational failure with the C API's message.
struct Failure {
  std::string message;
};

void check(int status) {
  if (status != CSW_OK) throw Failure{std::string(csw_status_name(status)) + ": " + csw_last_error()};
}

// Takes ownership of a string returned by the C API.
std::string take(char* s) {
  std::string out = s ? s : "";
  csw_string_free(s);
  return out;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure{"cannot read " + path};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text << '\n')) throw Failure{"cannot write " + path};
}

// Prints to stdout, or to --out when given.
void output(const std::optional<std::string>& out, const std::string& text) {
  if (out) {
    write_text(*out, text);
  } else {
    std::cout << text << '\n';
  }
}

struct Model {
  csw_model* handle = nullptr;
  explicit Model(const std::string& path) { check(csw_model_load(path.c_str(), &handle)); }
  ~Model() { csw_model_free(handle); }
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
};

// A training config file holds {"arch": {...}, "hyper": {...}}; both optional.
struct TrainConfig {
  std::string arch = "{}";
  json hyper = json::object();
};

TrainConfig read_train_config(const std::optional<std::string>& path, const std::optional<std::uint64_t>& seed) {
  TrainConfig c;
  if (path) {
    const json j = json::parse(read_text(*path));
    for (const auto& [key, value] : j.items()) {
      if (key == "arch") {
        c.arch = value.dump();
      } else if (key == "hyper") {
        c.hyper = value;
      } else {
        throw Failure{"unknown key \"" + key + "\" in " + *path + " (expected \"arch\" and/or \"hyper\")"};
      }
    }
  }
  if (seed) c.hyper["seed"] = *seed;
  return c;
}

std::string filter_json(const std::optional<std::size_t>& clip_len, const std::optional<double>& rate) {
  json f = json::object();
  if (clip_len) f["clip_len_frames"] = *clip_len;
  if (rate) f["rate"] = *rate;
  return f.dump();
}

void add_filter(CLI::App* cmd, std::optional<std::size_t>& clip_len, std::optional<double>& rate) {
  cmd->add_option("--clip-len", clip_len, "Only clips of this many frames");
  cmd->add_option("--rate", rate, "Only the group embedded at this rate");
}

std::string ablation_table(const json& rows) {
  std::ostringstream ss;
  char line[160];
  std::snprintf(line, sizeof line, "%-7s %-44s %6s %10s %9s %9s\n", "variant", "description", "m", "params",
                "accuracy", "train_s");
  ss << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-7s %-44s %6zu %10zu %9.4f %9.1f\n", r["variant"].get<std::string>().c_str(),
                  r["description"].get<std::string>().c_str(), r["m"].get<std::size_t>(),
                  r["parameters"].get<std::size_t>(), r["test_accuracy"].get<double>(),
                  r["train_seconds"].get<double>());
    ss << line;
  }
  return ss.str();
}

int on_epoch(const char* epoch_json, void*) {
  std::cerr << epoch_json << '\n';
  return 0;
}

int on_event(const csw_detection_event* e, void*) {
  const json j{{"start", e->start},
               {"end", e->end},
               {"p", e->probability},
               {"verdict", e->stego ? "stego" : "cover"},
               {"latency_ms", e->latency_ms},
               {"ts", e->timestamp}};
  std::cout << j.dump() << '\n' << std::flush;
  return std::cout ? 0 : 1;  // stop when stdout is gone
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Codeword-stream steganalysis toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(csw_version()));

  std::optional<std::uint64_t> seed;
  std::optional<double> threshold;
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::string> model_path;
  std::optional<std::string> manifest;
  std::optional<std::size_t> clip_len;
  std::optional<double> rate;

  auto* gen = app.add_subcommand("gen", "Build a cover/stego dataset from a config JSON");
  gen->add_option("--config", config, "Dataset config JSON file")->required()->check(CLI::ExistingFile);
  gen->add_option("--seed", seed, "Derive every dataset seed from this value");
  gen->add_option("--out", out, "Output directory (overrides out_dir)");

  double embed_rate = 1.0;
  std::string cover_path;
  std::uint64_t key_seed = 11;
  auto* embed = app.add_subcommand("embed", "Hide random bits in a cover .cwst file");
  embed->add_option("--cover", cover_path, "Cover .cwst file")->required()->check(CLI::ExistingFile);
  embed->add_option("--out", out, "Stego .cwst file to write")->required();
  embed->add_option("--rate", embed_rate, "Fraction of frames that carry bits")->check(CLI::Range(0.0, 1.0));
  embed->add_option("--seed", seed, "Frame selection and message seed");
  embed->add_option("--manifest", manifest, "Use this dataset's codebooks")->check(CLI::ExistingFile);
  embed->add_option("--key-seed", key_seed, "Codebook seed when no manifest is given");

  auto* train = app.add_subcommand("train", "Train a detector on a dataset's train split");
  train->add_option("--manifest", manifest, "Dataset manifest.json")->required()->check(CLI::ExistingFile);
  train->add_option("--config", config, "JSON file with optional \"arch\" and \"hyper\" objects")
      ->check(CLI::ExistingFile);
  train->add_option("--out", out, "Checkpoint to write")->required();
  train->add_option("--seed", seed, "Training seed (overrides hyper.seed)");
  add_filter(train, clip_len, rate);

  bool with_probabilities = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
  eval->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", manifest, "Dataset manifest.json")->required()->check(CLI::ExistingFile);
  eval->add_option("--threshold", threshold, "Decision threshold (default: the model's)")
      ->check(CLI::Range(0.0, 1.0));
  eval->add_option("--out", out, "Write the JSON report here instead of stdout");
  eval->add_flag("--probabilities", with_probabilities, "Include per-clip probabilities");
  add_filter(eval, clip_len, rate);

  auto* features = app.add_subcommand("features", "Export the fused feature vector of every test clip as CSV");
  features->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  features->add_option("--manifest", manifest, "Dataset manifest.json")->required()->check(CLI::ExistingFile);
  features->add_option("--out", out, "CSV file")->required();
  add_filter(features, clip_len, rate);

  std::vector<std::size_t> lengths{10, 100, 1000};
  std::size_t repetitions = 50;
  auto* bench = app.add_subcommand("bench", "Single-clip inference latency");
  bench->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  bench->add_option("--lengths", lengths, "Clip lengths in frames")->delimiter(',');
  bench->add_option("--repetitions", repetitions, "Timed runs per length (>= 30)");
  bench->add_option("--seed", seed, "Seed of the random clips");
  bench->add_option("--out", out, "Write the JSON report here instead of stdout");

  std::size_t window = 1000;
  std::size_t hop = 100;
  std::optional<std::string> input;
  std::optional<std::uint16_t> port;
  long idle_ms = 0;
  auto* detect = app.add_subcommand("detect", "Sliding-window detection over a framed stream (NDJSON events)");
  detect->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  detect->add_option("--window", window, "Window length W in frames");
  detect->add_option("--hop", hop, "Hop H in frames");
  detect->add_option("--threshold", threshold, "Decision threshold (default: the model's)")
      ->check(CLI::Range(0.0, 1.0));
  auto* input_opt = detect->add_option("--input", input, "Stream file (default: standard input)");
  detect->add_option("--port", port, "Accept one TCP connection on 127.0.0.1:PORT")->excludes(input_opt);
  detect->add_option("--idle-timeout-ms", idle_ms, "Fail when no byte arrives for this long (0 = never)");

  std::string variants = "bcdefghij";
  auto* ablate = app.add_subcommand("ablate", "Train and test architecture variants side by side");
  ablate->add_option("--manifest", manifest, "Dataset manifest.json")->required()->check(CLI::ExistingFile);
  ablate->add_option("--variants", variants, "Variant letters, 'a' being the default model");
  ablate->add_option("--config", config, "JSON file with optional \"arch\" and \"hyper\" objects")
      ->check(CLI::ExistingFile);
  ablate->add_option("--seed", seed, "Training seed");
  ablate->add_option("--out", out, "Write the JSON table here (a text table goes to stderr)");
  add_filter(ablate, clip_len, rate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      json cfg = json::parse(read_text(*config));
      if (out) cfg["out_dir"] = *out;
      char* manifest_out = nullptr;
      const std::uint64_t s = seed.value_or(0);
      check(csw_generate_dataset(cfg.dump().c_str(), seed ? &s : nullptr, &manifest_out));
      std::cout << json{{"manifest", take(manifest_out)}}.dump() << '\n';
    } else if (embed->parsed()) {
      char* report = nullptr;
      check(csw_embed_file(cover_path.c_str(), out->c_str(), embed_rate, seed.value_or(1),
                           manifest ? manifest->c_str() : nullptr, key_seed, &report));
      std::cout << take(report) << '\n';
    } else if (train->parsed()) {
      const TrainConfig c = read_train_config(config, seed);
      char* history = nullptr;
      check(csw_train(manifest->c_str(), c.arch.c_str(), c.hyper.dump().c_str(), filter_json(clip_len, rate).c_str(),
                      out->c_str(), on_epoch, nullptr, &history));
      json h = json::parse(take(history));
      h.erase("step_loss");
      std::cout << json{{"checkpoint", *out}, {"history", h}}.dump() << '\n';
    } else if (eval->parsed()) {
      Model m(*model_path);
      char* report = nullptr;
      check(csw_evaluate(m.handle, manifest->c_str(), filter_json(clip_len, rate).c_str(), threshold.value_or(-1.0),
                         with_probabilities ? 1 : 0, &report));
      output(out, take(report));
    } else if (features->parsed()) {
      Model m(*model_path);
      check(csw_export_features(m.handle, manifest->c_str(), filter_json(clip_len, rate).c_str(), out->c_str()));
    } else if (bench->parsed()) {
      Model m(*model_path);
      char* report = nullptr;
      check(csw_bench(m.handle, lengths.data(), lengths.size(), repetitions, seed.value_or(1), &report));
      output(out, take(report));
    } else if (detect->parsed()) {
      Model m(*model_path);
      json src;
      if (port) {
        src["tcp_port"] = *port;
      } else if (input) {
        src["file"] = *input;
      } else {
        src["stdin"] = true;
      }
      if (idle_ms > 0) src["idle_timeout_ms"] = idle_ms;
      char* summary = nullptr;
      check(csw_detect(m.handle, src.dump().c_str(), window, hop, threshold.value_or(-1.0), on_event, nullptr,
                       &summary));
      std::cerr << take(summary) << '\n';
    } else if (ablate->parsed()) {
      const TrainConfig c = read_train_config(config, seed);
      char* table = nullptr;
      check(csw_ablate(manifest->c_str(), variants.c_str(), c.arch.c_str(), c.hyper.dump().c_str(),
                       filter_json(clip_len, rate).c_str(), &table));
      const json rows = json::parse(take(table));
      std::cerr << ablation_table(rows);
      output(out, rows.dump());
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}
