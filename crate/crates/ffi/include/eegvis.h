#ifndef EEGVIS_H
#define EEGVIS_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EvStatus {
  EV_STATUS_OK = 0,
  EV_STATUS_NULL_POINTER = 1,
  EV_STATUS_INVALID_ARGUMENT = 2,
  EV_STATUS_IO = 3,
  EV_STATUS_FORMAT = 4,
  EV_STATUS_NUMERIC = 5,
  EV_STATUS_CONFIG = 6,
  EV_STATUS_MISSING_STAGE = 7,
  EV_STATUS_PANIC = 8,
} EvStatus;

typedef enum EvStage {
  EV_STAGE_SYNTH = 0,
  EV_STAGE_TRAIN_TOKENIZER = 1,
  EV_STAGE_TRAIN_ALIGN = 2,
  EV_STAGE_TRAIN_NSP = 3,
  EV_STAGE_GENERATE = 4,
  EV_STAGE_EVAL = 5,
  EV_STAGE_ANALYZE = 6,
} EvStage;

/**
 * A loaded dataset container.
 */
typedef struct EvDataset EvDataset;

/**
 * Run configuration bound to an output directory.
 */
typedef struct EvPipeline EvPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *ev_last_error(void);

/**
 * Library version, static storage.
 */
const char *ev_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void ev_string_free(char *s);

/**
 * Creates a pipeline writing to `out_dir`. `config_path` may be null for
 * the built-in desk configuration.
 *
 * # Safety
 * String arguments must be nul-terminated; `out` must be writable.
 */
enum EvStatus ev_pipeline_new(const char *out_dir,
                              const char *config_path,
                              struct EvPipeline **out);

/**
 * # Safety
 * `p` must be null or a live pipeline handle.
 */
void ev_pipeline_free(struct EvPipeline *p);

/**
 * # Safety
 * `p` must be a live pipeline handle.
 */
enum EvStatus ev_pipeline_set_seed(struct EvPipeline *p, uint64_t seed);

/**
 * # Safety
 * `p` must be a live pipeline handle.
 */
enum EvStatus ev_pipeline_set_sequential(struct EvPipeline *p, bool sequential);

/**
 * Sets tokenizer and transformer scales to squares of the given sides.
 *
 * # Safety
 * `p` must be a live pipeline handle; `sides` must hold `n` values.
 */
enum EvStatus ev_pipeline_set_schedule(struct EvPipeline *p, const size_t *sides, size_t n);

/**
 * Runs one stage; prerequisites must already be in the output directory.
 *
 * # Safety
 * `p` must be a live pipeline handle.
 */
enum EvStatus ev_pipeline_run(struct EvPipeline *p, enum EvStage stage);

/**
 * Resolved configuration as JSON. Free with [`ev_string_free`].
 *
 * # Safety
 * `p` must be a live pipeline handle; `out` must be writable.
 */
enum EvStatus ev_pipeline_config_json(struct EvPipeline *p, char **out);

/**
 * Hex SHA-256 of the canonical configuration. Free with [`ev_string_free`].
 *
 * # Safety
 * `p` must be a live pipeline handle; `out` must be writable.
 */
enum EvStatus ev_pipeline_config_hash(struct EvPipeline *p, char **out);

/**
 * # Safety
 * `path` must be nul-terminated; `out` must be writable.
 */
enum EvStatus ev_dataset_load(const char *path, struct EvDataset **out);

/**
 * # Safety
 * `d` must be null or a live dataset handle.
 */
void ev_dataset_free(struct EvDataset *d);

/**
 * # Safety
 * `d` must be a live dataset handle; `out` must be writable.
 */
enum EvStatus ev_dataset_pair_count(struct EvDataset *d, size_t *out);

/**
 * Raw epoch extent of a pair and its class label.
 *
 * # Safety
 * `d` must be a live dataset handle; outputs must be writable.
 */
enum EvStatus ev_dataset_pair_info(struct EvDataset *d,
                                   size_t pair,
                                   size_t *channels,
                                   size_t *samples,
                                   uint32_t *class_);

/**
 * Copies the raw `channels × samples` epoch of a pair into `buf`.
 *
 * # Safety
 * `d` must be a live dataset handle; `buf` must hold `len` doubles.
 */
enum EvStatus ev_dataset_copy_epoch(struct EvDataset *d, size_t pair, double *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EEGVIS_H */
