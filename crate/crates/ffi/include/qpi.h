#ifndef QPI_H
#define QPI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes of all fallible calls.
 */
typedef enum QpiStatus {
  QPI_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  QPI_STATUS_NULL_ARGUMENT = 1,
  /*
   Invalid configuration or input values.
   */
  QPI_STATUS_INVALID_INPUT = 2,
  /*
   File could not be read or written.
   */
  QPI_STATUS_IO = 3,
  /*
   File contents are malformed.
   */
  QPI_STATUS_FORMAT = 4,
  /*
   A numerical routine failed.
   */
  QPI_STATUS_NUMERIC = 5,
  /*
   Output buffer too small.
   */
  QPI_STATUS_BUFFER_TOO_SMALL = 6,
  /*
   Internal panic caught at the boundary.
   */
  QPI_STATUS_INTERNAL = 7,
} QpiStatus;

/*
 Opaque dataset of experiment records.
 */
typedef struct QpiDataset QpiDataset;

/*
 Opaque inferred or loaded model.
 */
typedef struct QpiModel QpiModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the most recent failed call on this thread, or an empty
 string. The pointer stays valid until the next call on the same thread.
 */
const char *qpi_last_error_message(void);

/*
 Reads a dataset file into `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QpiStatus qpi_dataset_load(const char *path, struct QpiDataset **out);

/*
 Releases a dataset; null is ignored.

 # Safety
 `ds` must come from [`qpi_dataset_load`] and not be used afterwards.
 */
void qpi_dataset_free(struct QpiDataset *ds);

/*
 Reads a model file into `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QpiStatus qpi_model_load(const char *path, struct QpiModel **out);

/*
 Writes a model file.

 # Safety
 `model` must be a live handle and `path` a NUL-terminated string.
 */
enum QpiStatus qpi_model_save(const struct QpiModel *model, const char *path);

/*
 Releases a model; null is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void qpi_model_free(struct QpiModel *model);

/*
 Model dimension, number of initial states and number of measurements.

 # Safety
 `model` must be a live handle; output pointers may be null.
 */
enum QpiStatus qpi_model_shape(const struct QpiModel *model,
                               uintptr_t *dimension,
                               uintptr_t *n_init,
                               uintptr_t *n_meas);

/*
 Predicted probabilities `S·T^t·P` written row-major into `buf`, which
 must hold `n_init * n_meas` values.

 # Safety
 `model` must be a live handle and `buf` valid for `len` writes.
 */
enum QpiStatus qpi_model_predict(const struct QpiModel *model,
                                 uint64_t t,
                                 double *buf,
                                 uintptr_t len);

/*
 Runs the full inference with default options; `dimension > 0` fixes the
 model dimension instead of estimating it.

 # Safety
 `ds` must be a live handle and `out` a valid pointer.
 */
enum QpiStatus qpi_infer(const struct QpiDataset *ds, uintptr_t dimension, struct QpiModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QPI_H */
