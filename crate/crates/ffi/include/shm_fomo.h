#ifndef SHM_FOMO_H
#define SHM_FOMO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Side length of the square spectrogram images.
#define SHM_SPEC_SIZE 100

typedef enum ShmStatus {
  SHM_STATUS_OK = 0,
  SHM_STATUS_NULL_POINTER = 1,
  SHM_STATUS_INVALID_ARGUMENT = 2,
  SHM_STATUS_IO = 3,
  SHM_STATUS_FORMAT = 4,
  SHM_STATUS_INTEGRITY = 5,
  SHM_STATUS_SHAPE = 6,
  SHM_STATUS_MODE = 7,
  SHM_STATUS_DATA = 8,
  SHM_STATUS_PANIC = 9,
  SHM_STATUS_OTHER = 10,
} ShmStatus;

// Opaque model handle.
typedef struct ShmModel ShmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `cap`). Returns the full message length in
// bytes, without the terminator.
//
// # Safety
// `buf` must be null or valid for `cap` bytes.
uintptr_t shm_last_error_message(char *buf, uintptr_t cap);

// Loads a checkpoint. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ShmStatus shm_model_load(const char *path, struct ShmModel **out);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must come from [`shm_model_load`] and not be used afterwards.
void shm_model_free(struct ShmModel *model);

// Number of trainable parameters of the loaded model.
//
// # Safety
// Pointers must be valid.
enum ShmStatus shm_model_param_count(const struct ShmModel *model, uintptr_t *out);

// 1 if the model has a reconstruction decoder, 0 if it is a regressor.
//
// # Safety
// Pointers must be valid.
enum ShmStatus shm_model_has_decoder(const struct ShmModel *model, int32_t *out);

// Standardized log-magnitude spectrogram of one normalized window, written
// row-major into `out` (`SHM_SPEC_SIZE * SHM_SPEC_SIZE` floats).
//
// # Safety
// `samples` must hold `len` values and `out` `out_len` floats.
enum ShmStatus shm_spectrogram(const double *samples, uintptr_t len, float *out, uintptr_t out_len);

// Masked reconstruction error of one image with the mask drawn from
// `eval_seed`.
//
// # Safety
// `image` must hold `len` floats; `out` must be valid.
enum ShmStatus shm_model_reconstruction_error(const struct ShmModel *model,
                                              const float *image,
                                              uintptr_t len,
                                              uint64_t eval_seed,
                                              double *out);

// Traffic-load prediction of a regression checkpoint.
//
// # Safety
// `image` must hold `len` floats; `out` must be valid.
enum ShmStatus shm_model_regress(const struct ShmModel *model,
                                 const float *image,
                                 uintptr_t len,
                                 float *out);

// Traffic target of a label window. `class` is 0 for any vehicle, 1 for
// light, 2 for heavy.
//
// # Safety
// `labels` must hold `len` bytes; `out` must be valid.
enum ShmStatus shm_compute_target(const uint8_t *labels,
                                  uintptr_t len,
                                  uint32_t class_,
                                  double *out);

// Causal median smoothing of an error series into `out` (`len` values).
//
// # Safety
// `errors` and `out` must each hold `len` values.
enum ShmStatus shm_median_smooth(const double *errors,
                                 uintptr_t len,
                                 uintptr_t filter_len,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHM_FOMO_H */
