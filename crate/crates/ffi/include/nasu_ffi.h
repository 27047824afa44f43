#ifndef NASU_FFI_H
#define NASU_FFI_H

/* Generated by cbindgen from nasu-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible entry point.
typedef enum NasuStatus {
  NasuStatus_Ok = 0,
  // Invalid configuration or arguments.
  NasuStatus_ConfigError = 2,
  // Missing or malformed data files.
  NasuStatus_DataError = 3,
  // Numeric divergence during optimization.
  NasuStatus_NumericError = 4,
  // A null pointer or non-UTF-8 string was passed in.
  NasuStatus_InvalidArgument = 64,
  // An internal panic was caught; see `nasu_last_error`.
  NasuStatus_Panic = 70,
} NasuStatus;

// Opaque run configuration handle.
typedef struct NasuConfig NasuConfig;

// Aggregate segmentation metrics of a completed run.
typedef struct NasuMetrics {
  double pixel_accuracy;
  double miou;
  double dsc;
  uint64_t num_pixels;
} NasuMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Engine version string; static storage, do not free.
const char *nasu_version(void);

// Message of the most recent failure on this thread. Valid until the next
// call into the library from the same thread; do not free.
const char *nasu_last_error(void);

// Fresh configuration with default (desk-scale) values.
struct NasuConfig *nasu_config_default(void);

// Parse a key=value configuration file; returns null on failure (see
// `nasu_last_error`).
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string.
struct NasuConfig *nasu_config_load(const char *path);

// Set one configuration key, e.g. ("search.epochs", "30").
//
// # Safety
// `config` must come from this library; `key`/`value` must be
// NUL-terminated UTF-8 strings.
enum NasuStatus nasu_config_set(struct NasuConfig *config, const char *key, const char *value);

// Apply the full-scale reference hyper-parameters.
//
// # Safety
// `config` must come from this library.
enum NasuStatus nasu_config_apply_paper_faithful(struct NasuConfig *config);

// Release a configuration handle. Null is a no-op.
//
// # Safety
// `config` must come from this library and not be used afterwards.
void nasu_config_free(struct NasuConfig *config);

// Generate the synthetic dataset into `out_dir`.
//
// # Safety
// Pointer arguments as documented on [`nasu_config_set`].
enum NasuStatus nasu_run_synth(const struct NasuConfig *config, const char *out_dir);

// Apply morphology / augmentation to the configured dataset.
//
// # Safety
// Pointer arguments as documented on [`nasu_config_set`].
enum NasuStatus nasu_run_preprocess(const struct NasuConfig *config, const char *out_dir);

// Run the architecture search; `resume` may be null or a checkpoint path.
//
// # Safety
// Pointer arguments as documented on [`nasu_config_set`].
enum NasuStatus nasu_run_search(const struct NasuConfig *config,
                                const char *out_dir,
                                const char *resume);

// Extract genotypes from the configured search checkpoint.
//
// # Safety
// Pointer arguments as documented on [`nasu_config_set`].
enum NasuStatus nasu_run_derive(const struct NasuConfig *config, const char *out_dir);

// Retrain the derived network from scratch; `resume` may be null.
//
// # Safety
// Pointer arguments as documented on [`nasu_config_set`].
enum NasuStatus nasu_run_retrain(const struct NasuConfig *config,
                                 const char *out_dir,
                                 const char *resume);

// Evaluate the configured checkpoint on the test split.
//
// # Safety
// Pointer arguments as documented on [`nasu_config_set`].
enum NasuStatus nasu_run_eval(const struct NasuConfig *config, const char *out_dir);

// Read the metrics.json of a completed run directory.
//
// # Safety
// `run_dir` must be a NUL-terminated UTF-8 string; `out` must point to
// writable memory for one [`NasuMetrics`].
enum NasuStatus nasu_read_metrics(const char *run_dir, struct NasuMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NASU_FFI_H */
