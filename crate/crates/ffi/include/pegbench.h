#ifndef PEGBENCH_H
#define PEGBENCH_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PbStatus {
  PB_STATUS_OK = 0,
  PB_STATUS_NULL_POINTER = 1,
  PB_STATUS_INVALID_ARGUMENT = 2,
  PB_STATUS_CONFIG = 3,
  PB_STATUS_IO = 4,
  PB_STATUS_FORMAT = 5,
  PB_STATUS_RUNTIME = 6,
  PB_STATUS_PANIC = 7,
} PbStatus;

typedef struct PbConfig PbConfig;

typedef struct PbDataset PbDataset;

typedef struct PbParams PbParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pb_last_error(void);

enum PbStatus pb_config_default(struct PbConfig **out);

/**
 * Parses a JSON config; missing fields take their defaults.
 */
enum PbStatus pb_config_from_json(const char *json, struct PbConfig **out);

enum PbStatus pb_config_load(const char *path, struct PbConfig **out);

enum PbStatus pb_config_set_seed(struct PbConfig *cfg, uint64_t seed);

void pb_config_free(struct PbConfig *cfg);

/**
 * Backward collection on the configured task.
 */
enum PbStatus pb_collect(const struct PbConfig *cfg, struct PbDataset **out);

size_t pb_dataset_len(const struct PbDataset *data);

enum PbStatus pb_dataset_save(const struct PbDataset *data, const char *path);

enum PbStatus pb_dataset_load(const char *path, struct PbDataset **out);

void pb_dataset_free(struct PbDataset *data);

/**
 * Trains with the configured augmentation and optimizer settings.
 */
enum PbStatus pb_train(const struct PbConfig *cfg,
                       const struct PbDataset *data,
                       struct PbParams **out);

enum PbStatus pb_params_save(const struct PbParams *params, const char *path);

enum PbStatus pb_params_load(const char *path, struct PbParams **out);

void pb_params_free(struct PbParams *params);

/**
 * Corrective action `(dx, dy, dθx, dθy, dθz)` for one observation.
 * `image` holds `image_len` values laid out row-major, channels last, and
 * must match the input size the parameters were trained for.
 */
enum PbStatus pb_predict(const struct PbParams *params,
                         const float *image,
                         size_t image_len,
                         const double *wrench,
                         double *out);

/**
 * Evaluation on the configured task; `trials` of 0 uses the configured count.
 */
enum PbStatus pb_eval(const struct PbConfig *cfg,
                      const struct PbParams *params,
                      size_t trials,
                      double *success_rate,
                      double *mean_duration);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PEGBENCH_H */
