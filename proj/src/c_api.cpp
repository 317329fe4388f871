#include "csw/c_api.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>
#include <string>

#include <json.hpp>

#include "csw/codeword_stream.hpp"
#include "csw/csw_model.hpp"
#include "csw/dataset.hpp"
#include "csw/error.hpp"
#include "csw/qim.hpp"
#include "csw/stream_detect.hpp"
#include "csw/train_eval.hpp"

#ifndef CSW_VERSION_STRING
#define CSW_VERSION_STRING "0.0.0"
#endif

struct csw_model {
  csw::CswModel model;
};

namespace {

using nlohmann::json;

thread_local std::string g_last_error;

// Thrown from inside a guarded body when a callback asks to stop.
struct Stopped {};

template <typename F>
int guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return CSW_OK;
  } catch (const csw::Error& e) {
    g_last_error = e.what();
    return static_cast<int>(e.code());
  } catch (const Stopped&) {
    g_last_error = "stopped by callback";
    return CSW_STOPPED;
  } catch (const json::exception& e) {
    g_last_error = std::string("bad JSON: ") + e.what();
    return CSW_CONFIG;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return CSW_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CSW_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return CSW_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw csw::Error(csw::ErrorCode::kInvalidArgument, std::string(what) + " must not be null");
}

json parse_or_empty(const char* text) {
  if (!text || !*text) return json::object();
  return json::parse(text);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void emit(char** out, const json& j) {
  if (out) *out = dup_string(j.dump());
}

csw::ManifestFilter parse_filter(const char* text) {
  const json j = parse_or_empty(text);
  csw::ManifestFilter f;
  for (const auto& [key, value] : j.items()) {
    if (key == "clip_len_frames") {
      f.clip_len_frames = value.get<std::size_t>();
    } else if (key == "rate") {
      f.group_rate = value.get<double>();
    } else {
      throw csw::Error(csw::ErrorCode::kConfig, "unknown filter key \"" + key + "\"");
    }
  }
  return f;
}

csw::ArchConfig parse_arch(const char* text) { return csw::parse_arch_config(parse_or_empty(text)); }

double pick_threshold(const csw::CswModel& model, double threshold) {
  return threshold > 0.0 && threshold < 1.0 ? threshold : model.config().threshold;
}

}  // namespace

extern "C" {

const char* csw_version(void) { return CSW_VERSION_STRING; }

const char* csw_status_name(int status) {
  if (status == CSW_OK) return "Ok";
  if (status == CSW_STOPPED) return "Stopped";
  return csw::error_code_name(static_cast<csw::ErrorCode>(status));
}

const char* csw_last_error(void) { return g_last_error.c_str(); }

void csw_string_free(char* s) { std::free(s); }

int csw_generate_dataset(const char* config_json, const uint64_t* seed, char** manifest_path) {
  return guarded([&] {
    require(config_json, "config_json");
    csw::DatasetConfig config = csw::parse_dataset_config(json::parse(config_json));
    if (seed) config.seeds = csw::DatasetSeeds::from_global(*seed);
    const auto manifest = csw::build_dataset(config);
    if (manifest_path) *manifest_path = dup_string((manifest.root / csw::kManifestFileName).string());
  });
}

int csw_embed_file(const char* cover_path, const char* stego_path, double rate, uint64_t seed,
                   const char* manifest_path, uint64_t key_seed, char** report) {
  return guarded([&] {
    require(cover_path, "cover_path");
    require(stego_path, "stego_path");
    const csw::CodewordClip cover = csw::read_container(cover_path);
    const csw::QimKey key = manifest_path ? csw::load_manifest(manifest_path).qim_key()
                                          : csw::make_qim_key(cover.codebook_sizes, 3, key_seed);
    const auto record = csw::qim_embed_random(cover, rate, key, seed);
    csw::write_container(record.stego, stego_path);
    json meta{{"label", "stego"},
              {"embedding_rate", rate},
              {"clip_len_frames", cover.size()},
              {"embed_seed", seed},
              {"embedded_frames", record.embedded_frames()},
              {"mask", csw::bits_to_hex(record.mask)},
              {"message_bits", record.bits.size()},
              {"message", csw::bits_to_hex(record.bits)}};
    if (!manifest_path) meta["codebook_seed"] = key_seed;
    csw::write_sidecar(stego_path, meta);
    emit(report, {{"stego", stego_path},
                  {"frames", cover.size()},
                  {"embedded_frames", record.embedded_frames()},
                  {"message_bits", record.bits.size()},
                  {"mean_displacement", csw::mean_displacement(cover, record.stego, key)}});
  });
}

int csw_model_create(const char* arch_json, uint64_t seed, csw_model** out) {
  return guarded([&] {
    require(out, "out");
    *out = new csw_model{csw::CswModel::build(parse_arch(arch_json), seed)};
  });
}

int csw_model_load(const char* checkpoint_path, csw_model** out) {
  return guarded([&] {
    require(checkpoint_path, "checkpoint_path");
    require(out, "out");
    *out = new csw_model{csw::load_checkpoint(checkpoint_path).model};
  });
}

int csw_model_save(const csw_model* model, const char* checkpoint_path) {
  return guarded([&] {
    require(model, "model");
    require(checkpoint_path, "checkpoint_path");
    csw::save_checkpoint(model->model, checkpoint_path);
  });
}

void csw_model_free(csw_model* model) { delete model; }

int csw_model_info(const csw_model* model, char** info_json) {
  return guarded([&] {
    require(model, "model");
    // parameters() hands out mutable views but reading the sizes changes
    // nothing; the handle itself was created non-const.
    auto& m = const_cast<csw_model*>(model)->model;
    emit(info_json, {{"arch", csw::to_json(m.config())},
                     {"fused_input_dim", m.fused_input_dim()},
                     {"fused_dim", m.fused_dim()},
                     {"min_clip_frames", m.min_clip_frames()},
                     {"threshold", m.config().threshold},
                     {"parameters", csw::parameter_count(m)}});
  });
}

int csw_model_set_threshold(csw_model* model, double threshold) {
  return guarded([&] {
    require(model, "model");
    model->model.set_threshold(threshold);
  });
}

int csw_predict(const csw_model* model, const uint16_t* frames, size_t n_frames, double* probability, int* stego) {
  return guarded([&] {
    require(model, "model");
    require(frames, "frames");
    csw::CodewordClip clip;
    clip.frames.resize(n_frames);
    for (std::size_t i = 0; i < n_frames; ++i) {
      for (int s = 0; s < csw::kSlots; ++s) clip.frames[i][s] = frames[i * csw::kSlots + static_cast<std::size_t>(s)];
    }
    csw::validate_clip(clip);
    const auto v = model->model.predict(clip);
    if (probability) *probability = v.probability;
    if (stego) *stego = v.stego ? 1 : 0;
  });
}

int csw_train(const char* manifest_path, const char* arch_json, const char* hyper_json, const char* filter_json,
              const char* checkpoint_path, csw_epoch_callback on_epoch, void* user, char** history_json) {
  return guarded([&] {
    require(manifest_path, "manifest_path");
    require(checkpoint_path, "checkpoint_path");
    const auto manifest = csw::load_manifest(manifest_path);
    const auto hyper = csw::parse_hyper_params(parse_or_empty(hyper_json));
    csw::EpochCallback cb;
    if (on_epoch) {
      cb = [&](const csw::EpochRecord& e) { return on_epoch(csw::to_json(e).dump().c_str(), user) == 0; };
    }
    const auto result =
        csw::train(manifest, parse_arch(arch_json), hyper, checkpoint_path, parse_filter(filter_json), cb);
    emit(history_json, csw::to_json(result.history));
  });
}

int csw_evaluate(const csw_model* model, const char* manifest_path, const char* filter_json, double threshold,
                 int with_probabilities, char** report_json) {
  return guarded([&] {
    require(model, "model");
    require(manifest_path, "manifest_path");
    const auto manifest = csw::load_manifest(manifest_path);
    const auto examples = csw::load_examples(manifest, csw::Split::kTest, parse_filter(filter_json));
    const auto report = csw::evaluate(model->model, examples, pick_threshold(model->model, threshold));
    emit(report_json, csw::to_json(report, with_probabilities != 0));
  });
}

int csw_export_features(const csw_model* model, const char* manifest_path, const char* filter_json,
                        const char* csv_path) {
  return guarded([&] {
    require(model, "model");
    require(manifest_path, "manifest_path");
    require(csv_path, "csv_path");
    const auto manifest = csw::load_manifest(manifest_path);
    const auto examples = csw::load_examples(manifest, csw::Split::kTest, parse_filter(filter_json));
    csw::export_features(model->model, examples, csv_path);
  });
}

int csw_bench(const csw_model* model, const size_t* lengths, size_t n_lengths, size_t repetitions, uint64_t seed,
              char** report_json) {
  return guarded([&] {
    require(model, "model");
    require(lengths, "lengths");
    const std::vector<std::size_t> ls(lengths, lengths + n_lengths);
    emit(report_json, csw::to_json(csw::bench_latency(model->model, ls, repetitions, 5, seed)));
  });
}

int csw_ablate(const char* manifest_path, const char* variants, const char* arch_json, const char* hyper_json,
               const char* filter_json, char** table_json) {
  return guarded([&] {
    require(manifest_path, "manifest_path");
    const auto manifest = csw::load_manifest(manifest_path);
    const std::string which = variants && *variants ? variants : std::string(csw::kAblationVariants);
    const auto rows = csw::ablate(manifest, which, parse_arch(arch_json),
                                  csw::parse_hyper_params(parse_or_empty(hyper_json)), parse_filter(filter_json));
    emit(table_json, csw::to_json(rows));
  });
}

int csw_detect(const csw_model* model, const char* source_json, size_t window, size_t hop, double threshold,
               csw_event_callback on_event, void* user, char** summary_json) {
  return guarded([&] {
    require(model, "model");
    require(source_json, "source_json");
    require(reinterpret_cast<const void*>(on_event), "on_event");
    const json src = json::parse(source_json);
    csw::SourceOptions opts;
    if (src.contains("idle_timeout_ms")) opts.idle_timeout = std::chrono::milliseconds(src["idle_timeout_ms"].get<long>());
    std::unique_ptr<csw::ByteSource> bytes;
    if (src.contains("file")) {
      bytes = csw::open_file_bytes(src["file"].get<std::string>(), opts);
    } else if (src.value("stdin", false)) {
      bytes = csw::stdin_bytes(opts);
    } else if (src.contains("tcp_port")) {
      bytes = csw::tcp_bytes(src["tcp_port"].get<std::uint16_t>(), opts);
    } else {
      throw csw::Error(csw::ErrorCode::kInvalidArgument, "source needs \"file\", \"stdin\" or \"tcp_port\"");
    }
    csw::FrameSource source(std::move(bytes));
    csw::DetectOptions options;
    options.window = window;
    options.hop = hop;
    options.threshold = pick_threshold(model->model, threshold);
    const auto summary = csw::sliding_detect(source, model->model, options, [&](const csw::DetectionEvent& e) {
      const csw_detection_event ce{e.start, e.end, e.probability, e.stego ? 1 : 0, e.latency_ms, e.timestamp};
      return on_event(&ce, user) == 0;
    });
    emit(summary_json, {{"frames", summary.frames}, {"events", summary.events}, {"stopped", summary.stopped}});
    if (summary.stopped) throw Stopped{};
  });
}

}  // extern "C"
