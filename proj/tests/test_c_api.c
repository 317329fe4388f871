/* Exercises the shared library through its C header only. */

#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "csw/c_api.h"

static int failures = 0;

#define EXPECT(cond)                                                        \
  do {                                                                      \
    if (!(cond)) {                                                          \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond,        \
              csw_last_error());                                            \
      ++failures;                                                           \
    }                                                                       \
  } while (0)

static const char* kArch =
    "{\"conv1_kernels\":6,\"conv2_kernels\":4,\"skip_rows\":3,\"fused_dim\":5}";

static int count_events(const csw_detection_event* e, void* user) {
  size_t* n = (size_t*)user;
  if (e->end - e->start != 30) return 1;
  ++*n;
  return 0;
}

static int stop_after_first(const csw_detection_event* e, void* user) {
  (void)e;
  ++*(size_t*)user;
  return 1;
}

static int count_epochs(const char* json, void* user) {
  if (strstr(json, "\"epoch\"") == NULL) return 1;
  ++*(int*)user;
  return 0;
}

int main(int argc, char** argv) {
  const char* dir = argc > 1 ? argv[1] : "c_api_out";
  char config[512], path[512], source[600];
  char* manifest = NULL;
  char* text = NULL;
  csw_model* model = NULL;
  csw_model* loaded = NULL;
  uint64_t seed = 3;
  uint16_t frames[3 * 40];
  double p1 = 0.0, p2 = 0.0;
  int stego = -1, epochs = 0;
  size_t i, events = 0;

  EXPECT(strlen(csw_version()) > 0);
  EXPECT(strcmp(csw_status_name(CSW_OK), "Ok") == 0);

  /* Errors come back as codes with a message, never as crashes. */
  EXPECT(csw_model_create("{\"conv1_kernels\":0}", 1, &model) == CSW_CONFIG);
  EXPECT(strlen(csw_last_error()) > 0);
  EXPECT(csw_model_create("{not json", 1, &model) == CSW_CONFIG);
  EXPECT(csw_model_load("/nonexistent/m.ckpt", &model) == CSW_IO);
  EXPECT(csw_predict(NULL, frames, 40, &p1, &stego) == CSW_INVALID_ARGUMENT);

  snprintf(config, sizeof config,
           "{\"clip_lengths_frames\":[30],\"embedding_rates\":[1.0],\"n_per_class\":10,\"out_dir\":\"%s/data\"}",
           dir);
  EXPECT(csw_generate_dataset(config, &seed, &manifest) == CSW_OK);
  EXPECT(manifest != NULL && strstr(manifest, "manifest.json") != NULL);

  EXPECT(csw_model_create(kArch, 7, &model) == CSW_OK);
  EXPECT(csw_model_info(model, &text) == CSW_OK);
  EXPECT(text != NULL && strstr(text, "\"fused_input_dim\":27") != NULL);
  csw_string_free(text);

  for (i = 0; i < 3 * 40; ++i) frames[i] = (uint16_t)(i % 32);
  EXPECT(csw_predict(model, frames, 40, &p1, &stego) == CSW_OK);
  EXPECT(p1 > 0.0 && p1 < 1.0);
  EXPECT(stego == (p1 >= 0.5));
  EXPECT(csw_predict(model, frames, 11, &p1, &stego) == CSW_CLIP_TOO_SHORT);
  frames[5] = 500;
  EXPECT(csw_predict(model, frames, 40, &p1, &stego) == CSW_INDEX_OUT_OF_RANGE);
  frames[5] = 5;
  EXPECT(csw_predict(model, frames, 40, &p1, &stego) == CSW_OK);

  snprintf(path, sizeof path, "%s/m.ckpt", dir);
  EXPECT(csw_model_save(model, path) == CSW_OK);
  EXPECT(csw_model_load(path, &loaded) == CSW_OK);
  EXPECT(csw_predict(loaded, frames, 40, &p2, &stego) == CSW_OK);
  EXPECT(p1 == p2);
  EXPECT(csw_model_set_threshold(loaded, 1.5) != CSW_OK);

  EXPECT(csw_train(manifest, kArch, "{\"epochs\":2,\"batch_size\":8}", NULL, path, count_epochs, &epochs, &text) ==
         CSW_OK);
  EXPECT(epochs == 2);
  EXPECT(text != NULL && strstr(text, "\"epochs\"") != NULL);
  csw_string_free(text);
  EXPECT(csw_train(manifest, kArch, "{\"bogus\":1}", NULL, path, NULL, NULL, NULL) == CSW_CONFIG);

  EXPECT(csw_evaluate(loaded, manifest, "{\"clip_len_frames\":30}", 0.0, 1, &text) == CSW_OK);
  EXPECT(text != NULL && strstr(text, "\"accuracy\"") != NULL);
  csw_string_free(text);

  snprintf(source, sizeof source, "{\"file\":\"%s/data/L30_r100/stego_00000.cwst\"}", dir);
  EXPECT(csw_detect(loaded, source, 30, 30, 0.0, count_events, &events, &text) == CSW_OK);
  EXPECT(events == 1);
  csw_string_free(text);
  events = 0;
  EXPECT(csw_detect(loaded, source, 12, 1, 0.0, stop_after_first, &events, NULL) == CSW_STOPPED);
  EXPECT(events == 1);

  csw_model_free(loaded);
  csw_model_free(model);
  csw_string_free(manifest);
  if (failures) fprintf(stderr, "%d failure(s)\n", failures);
  return failures ? 1 : 0;
}
