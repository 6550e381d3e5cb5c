/* prunekit C ABI. Generated by cbindgen; do not edit. */

#ifndef PRUNEKIT_H
#define PRUNEKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible entry point.
typedef enum PkStatus {
  PK_OK = 0,
  PK_NULL_POINTER = 1,
  PK_INVALID_ARGUMENT = 2,
  PK_BAD_MODEL = 3,
  PK_NUMERIC_ERROR = 4,
  PK_IO_ERROR = 5,
  PK_INTERNAL_ERROR = 6,
} PkStatus;

// Opaque model handle.
typedef struct PkModel PkModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pk_version(void);

// Message for the most recent failure on this thread. Never NULL; empty
// before the first failure. Valid until the next failing call.
const char *pk_last_error_message(void);

// Frees a string allocated by this library.
//
// # Safety
// `s` must have come from a `char **` out-param of this library and not
// have been freed already. NULL is a no-op.
void pk_string_free(char *s);

// Builds a randomly initialized model from an architecture description in
// JSON, e.g. `{"input_dim":8,"hidden":[{"width":16,"activation":"elu",
// "batchnorm":true,"dropout":0.0}],"output_width":1}`.
//
// # Safety
// `spec_json` must be a valid NUL-terminated string and `out` a valid
// pointer.
enum PkStatus pk_model_init_random(const char *spec_json, uint64_t seed, struct PkModel **out);

// Loads a serialized model file (f32 or f16).
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum PkStatus pk_model_load(const char *path, struct PkModel **out);

// Serializes a model to a file at the given precision (0 = f32, 1 = f16).
//
// # Safety
// `model` must be a live handle and `path` a valid NUL-terminated string.
enum PkStatus pk_model_save(const struct PkModel *model, const char *path, int32_t precision);

// Releases a model handle. NULL is a no-op.
//
// # Safety
// `model` must have come from this library and not have been freed.
void pk_model_free(struct PkModel *model);

// Deep-copies a model handle.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum PkStatus pk_model_clone(const struct PkModel *model, struct PkModel **out);

// Feature width the model expects.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum PkStatus pk_model_input_dim(const struct PkModel *model, size_t *out);

// Writes the hidden layer widths into `widths` (up to `capacity` elements)
// and the true count into `count`. Fails when capacity is too small.
//
// # Safety
// `model` must be live; `widths` must point to `capacity` writable
// elements; `count` must be valid.
enum PkStatus pk_model_hidden_widths(const struct PkModel *model,
                                     size_t *widths,
                                     size_t capacity,
                                     size_t *count);

// Total and nonzero trainable parameter counts.
//
// # Safety
// `model` must be live; both out-pointers must be valid.
enum PkStatus pk_model_param_counts(const struct PkModel *model,
                                    uint64_t *total,
                                    uint64_t *nonzero);

// Raw and zipped serialized sizes at a precision (0 = f32, 1 = f16).
//
// # Safety
// `model` must be live; both out-pointers must be valid.
enum PkStatus pk_model_measure_sizes(const struct PkModel *model,
                                     int32_t precision,
                                     uint64_t *raw_bytes,
                                     uint64_t *zip_bytes);

// Eval-mode sigmoid scores for `n` samples into `scores_out` (length `n`).
//
// # Safety
// `model` must be live; `features` must hold `n * dim` floats;
// `scores_out` must hold `n` doubles.
enum PkStatus pk_model_predict(const struct PkModel *model,
                               const float *features,
                               size_t n,
                               size_t dim,
                               double *scores_out);

// SGD-trains the model in place.
//
// # Safety
// `model` must be a live, uniquely held handle; `features` must hold
// `n * dim` floats and `labels` `n` bytes.
enum PkStatus pk_model_train(struct PkModel *model,
                             const float *features,
                             const uint8_t *labels,
                             size_t n,
                             size_t dim,
                             size_t epochs,
                             size_t batch_size,
                             float learning_rate,
                             uint64_t seed);

// Computes a parameter-level damage report and returns it as CSV
// (`layer,row,col,damage,mean,sd`). The batch may be empty (`n == 0`) for
// the `random` and `magnitude` methods.
//
// # Safety
// `model` must be live; `method` a valid string; `csv_out` a valid
// pointer; batch buffers as in [`pk_model_train`] when `n > 0`.
enum PkStatus pk_damage_report_csv(const struct PkModel *model,
                                   const char *method,
                                   const float *features,
                                   const uint8_t *labels,
                                   size_t n,
                                   size_t dim,
                                   uint64_t seed,
                                   char **csv_out);

// Masks the lowest-damage `fraction` of each hidden layer's parameters,
// returning a new model handle.
//
// # Safety
// Pointer contracts as in [`pk_damage_report_csv`]; `out` must be valid.
enum PkStatus pk_prune_parameters(const struct PkModel *model,
                                  const char *method,
                                  const float *features,
                                  const uint8_t *labels,
                                  size_t n,
                                  size_t dim,
                                  double fraction,
                                  uint64_t seed,
                                  struct PkModel **out);

// Structurally removes `fraction` of neurons per hidden layer (or globally
// with a scarcity penalty when `global_scope` is nonzero), returning a new
// model handle. `method` may be any estimator name, `dropout`, or `merge`.
//
// # Safety
// Pointer contracts as in [`pk_damage_report_csv`]; `out` must be valid.
enum PkStatus pk_prune_neurons(const struct PkModel *model,
                               const char *method,
                               const float *features,
                               const uint8_t *labels,
                               size_t n,
                               size_t dim,
                               double fraction,
                               int32_t global_scope,
                               size_t layer_floor,
                               uint64_t seed,
                               struct PkModel **out);

// ROC AUC of scores against binary labels.
//
// # Safety
// `scores` must hold `n` doubles, `labels` `n` bytes, `out` one double.
enum PkStatus pk_metrics_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// TPR at the given false-positive-rate budget.
//
// # Safety
// Pointer contracts as in [`pk_metrics_auc`].
enum PkStatus pk_metrics_tpr_at_fpr(const double *scores,
                                    const uint8_t *labels,
                                    size_t n,
                                    double target_fpr,
                                    double *out);

// Generates the synthetic benchmark data described by a JSON
// [`SynthConfig`] and writes train/test CSV files.
//
// # Safety
// All three arguments must be valid NUL-terminated strings.
enum PkStatus pk_synth_to_csv(const char *config_json,
                              const char *train_path,
                              const char *test_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PRUNEKIT_H */
