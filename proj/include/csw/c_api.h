#ifndef CSW_C_API_H
#define CSW_C_API_H

/* C interface to the steganalysis toolkit.
 *
 * Every function returns CSW_OK or one of the error codes below; the message
 * of the most recent failure on the calling thread is available from
 * csw_last_error(). Structured inputs and outputs are JSON strings. Strings
 * returned through `char**` out-parameters are owned by the caller and must
 * be released with csw_string_free(). */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(CSW_BUILDING_LIBRARY)
#define CSW_API __attribute__((visibility("default")))
#else
#define CSW_API
#endif

typedef enum csw_status {
  CSW_OK = 0,
  CSW_INVALID_ARGUMENT = 1,
  CSW_IO = 2,
  CSW_FORMAT = 3,
  CSW_VERSION_MISMATCH = 4,
  CSW_INDEX_OUT_OF_RANGE = 5,
  CSW_EMPTY_STREAM = 6,
  CSW_CONFIG = 7,
  CSW_SHAPE_MISMATCH = 8,
  CSW_CLIP_TOO_SHORT = 9,
  CSW_ARCH_MISMATCH = 10,
  CSW_NON_FINITE_GRADIENT = 11,
  CSW_EMPTY_SPLIT = 12,
  CSW_BITS_EXHAUSTED = 13,
  CSW_RATE_OUT_OF_RANGE = 14,
  CSW_BAD_SIZE = 15,
  CSW_TOO_SHORT = 16,
  CSW_BATCH_TOO_SMALL = 17,
  CSW_DOMAIN = 18,
  CSW_IDLE_TIMEOUT = 19,
  CSW_INTERNAL = 20,
  CSW_STOPPED = 21 /* a callback asked to stop */
} csw_status;

typedef struct csw_model csw_model;

CSW_API const char* csw_version(void);
CSW_API const char* csw_status_name(int status);
/* Empty string when the thread has not seen a failure. */
CSW_API const char* csw_last_error(void);
CSW_API void csw_string_free(char* s);

/* ---- data ---------------------------------------------------------------- */

/* Builds a dataset from a config JSON object (clip_lengths_frames,
 * embedding_rates, n_per_class, out_dir, ...). `seed`, when non-null,
 * overrides every seed of the config. Writes the manifest path to
 * `manifest_path`. */
CSW_API int csw_generate_dataset(const char* config_json, const uint64_t* seed, char** manifest_path);

/* Hides random bits in a cover .cwst file at `rate`. The QIM key comes from
 * `key_seed` (or the manifest's key when `manifest_path` is non-null, in
 * which case key_seed is ignored). Writes the stego file and its sidecar;
 * `report` (optional) receives a JSON summary. */
CSW_API int csw_embed_file(const char* cover_path, const char* stego_path, double rate, uint64_t seed,
                           const char* manifest_path, uint64_t key_seed, char** report);

/* ---- models -------------------------------------------------------------- */

/* `arch_json` may be null or "{}" for the default architecture. */
CSW_API int csw_model_create(const char* arch_json, uint64_t seed, csw_model** out);
CSW_API int csw_model_load(const char* checkpoint_path, csw_model** out);
CSW_API int csw_model_save(const csw_model* model, const char* checkpoint_path);
CSW_API void csw_model_free(csw_model* model);
/* Architecture, |Z|, |O|, minimum clip length, threshold and parameter
 * count. */
CSW_API int csw_model_info(const csw_model* model, char** info_json);
CSW_API int csw_model_set_threshold(csw_model* model, double threshold);

/* `frames` holds n_frames * 3 codeword indices, frame by frame; codebook
 * sizes are the default 128/32/32. */
CSW_API int csw_predict(const csw_model* model, const uint16_t* frames, size_t n_frames, double* probability,
                        int* stego);

/* ---- training and evaluation --------------------------------------------- */

/* Receives each epoch record as JSON; return non-zero to stop training. */
typedef int (*csw_epoch_callback)(const char* epoch_json, void* user);

/* Trains on the manifest's train split. `filter_json` may select one clip
 * length and/or rate group: {"clip_len_frames": 1000, "rate": 1.0}. Saves
 * the best checkpoint and returns the history as JSON. */
CSW_API int csw_train(const char* manifest_path, const char* arch_json, const char* hyper_json,
                      const char* filter_json, const char* checkpoint_path, csw_epoch_callback on_epoch, void* user,
                      char** history_json);

/* Evaluates on the test split. A threshold outside (0, 1) means the
 * model's. */
CSW_API int csw_evaluate(const csw_model* model, const char* manifest_path, const char* filter_json, double threshold,
                         int with_probabilities, char** report_json);

CSW_API int csw_export_features(const csw_model* model, const char* manifest_path, const char* filter_json,
                                const char* csv_path);

CSW_API int csw_bench(const csw_model* model, const size_t* lengths, size_t n_lengths, size_t repetitions,
                      uint64_t seed, char** report_json);

/* Trains and tests each variant letter ('a'..'j'). */
CSW_API int csw_ablate(const char* manifest_path, const char* variants, const char* arch_json,
                       const char* hyper_json, const char* filter_json, char** table_json);

/* ---- streaming detection ------------------------------------------------- */

typedef struct csw_detection_event {
  uint64_t start;
  uint64_t end;
  double probability;
  int stego;
  double latency_ms;
  double timestamp; /* Unix seconds */
} csw_detection_event;

/* Return non-zero to stop. */
typedef int (*csw_event_callback)(const csw_detection_event* event, void* user);

/* `source_json` is one of {"file": "path"}, {"stdin": true} or
 * {"tcp_port": 9000}, optionally with "idle_timeout_ms". A threshold
 * outside (0, 1) means the model's. `summary_json` (optional) receives
 * {"frames", "events", "stopped"}. Returns CSW_STOPPED when the callback
 * ends detection early; the summary is still written. Events already
 * delivered stay valid when the stream later fails. */
CSW_API int csw_detect(const csw_model* model, const char* source_json, size_t window, size_t hop, double threshold,
                       csw_event_callback on_event, void* user, char** summary_json);

#ifdef __cplusplus
}
#endif

#endif /* CSW_C_API_H */
