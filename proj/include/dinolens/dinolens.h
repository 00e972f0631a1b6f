/* SPDX-License-Identifier: Apache-2.0 */
#ifndef DINOLENS_DINOLENS_H
#define DINOLENS_DINOLENS_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define DINOLENS_API __declspec(dllexport)
#else
#define DINOLENS_API __attribute__((visibility("default")))
#endif

typedef enum dinolens_status {
  DINOLENS_OK = 0,
  DINOLENS_ERR_DIMENSION = 1,
  DINOLENS_ERR_FORMAT = 2,
  DINOLENS_ERR_VALIDATION = 3,
  DINOLENS_ERR_NUMERIC = 4,
  DINOLENS_ERR_CONTRACT = 5,
  DINOLENS_ERR_DEGENERATE = 6,
  DINOLENS_ERR_IO = 7,
  DINOLENS_ERR_ARGUMENT = 8, /* null handle or pointer, bad buffer size */
  DINOLENS_ERR_INTERNAL = 9
} dinolens_status;

typedef struct dinolens_model dinolens_model;
typedef struct dinolens_features dinolens_features;

DINOLENS_API const char* dinolens_version(void);
DINOLENS_API const char* dinolens_status_name(dinolens_status status);
/* Message of the last failed call on this thread; "" when none. */
DINOLENS_API const char* dinolens_last_error(void);
/* Releases strings returned through char** out-parameters. */
DINOLENS_API void dinolens_string_free(char* text);

/* Models. `spec_json` is a model spec object, e.g.
 * {"source":"random","pe_kind":"alibi2d","seed":3} or
 * {"source":"checkpoint","path":"m.vitw"}; omitted keys take defaults. */
DINOLENS_API dinolens_status dinolens_model_create(const char* spec_json, dinolens_model** out);
DINOLENS_API dinolens_status dinolens_model_load(const char* path, dinolens_model** out);
DINOLENS_API dinolens_status dinolens_model_save(const dinolens_model* model, const char* path);
/* JSON object with the model configuration; free with dinolens_string_free. */
DINOLENS_API dinolens_status dinolens_model_info(const dinolens_model* model, char** out_json);
DINOLENS_API void dinolens_model_free(dinolens_model* model);

/* Runs the model on a planar image (channel, row, column order) and keeps the
 * final layer, or every block output too when all_layers is nonzero. */
DINOLENS_API dinolens_status dinolens_model_forward(const dinolens_model* model, const float* pixels, size_t channels,
                                                    size_t height, size_t width, int all_layers,
                                                    dinolens_features** out);

/* Patch-token feature stacks (FEAT1 files). */
DINOLENS_API dinolens_status dinolens_features_read(const char* path, dinolens_features** out);
DINOLENS_API dinolens_status dinolens_features_write(const dinolens_features* features, const char* path);
DINOLENS_API dinolens_status dinolens_features_shape(const dinolens_features* features, size_t* layers, size_t* rows,
                                                     size_t* cols, size_t* channels);
/* Borrowed pointer to layer `layer`: rows*cols*channels floats, token-major.
 * Valid until the handle is freed. */
DINOLENS_API dinolens_status dinolens_features_layer(const dinolens_features* features, size_t layer,
                                                     const float** data);
DINOLENS_API void dinolens_features_free(dinolens_features* features);

/* Normalized ALiBi distance matrix; `out` holds (rows*cols)^2 doubles. */
DINOLENS_API dinolens_status dinolens_build_alibi(size_t rows, size_t cols, int wrap, double* out, size_t out_len);

/* Holdout R^2 of a linear probe onto (column, row) on the last layer. */
DINOLENS_API dinolens_status dinolens_joint_xy_score(const dinolens_features* features, double sample_frac,
                                                     size_t repeats, uint64_t seed, double* out);

/* Experiment commands. Writes a run directory under `out_root` and returns
 * its path and the JSON summary (both freed with dinolens_string_free; either
 * out-parameter may be null). threads <= 0 falls back to DINOLENS_THREADS. */
DINOLENS_API dinolens_status dinolens_run(const char* command, const char* config_json, const char* out_root,
                                          int threads, char** run_dir, char** summary_json);
/* Resolved default config of a command as JSON. */
DINOLENS_API dinolens_status dinolens_default_config(const char* command, char** out_json);
/* Newline-separated command names. */
DINOLENS_API const char* dinolens_commands(void);

#ifdef __cplusplus
}
#endif

#endif /* DINOLENS_DINOLENS_H */
