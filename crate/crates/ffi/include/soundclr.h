#ifndef SOUNDCLR_H
#define SOUNDCLR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SoundclrStatus {
  SOUNDCLR_STATUS_OK = 0,
  /**
   * Invalid configuration or argument shapes.
   */
  SOUNDCLR_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Unreadable or malformed input data.
   */
  SOUNDCLR_STATUS_DATA = 2,
  /**
   * A non-finite value appeared in a computation.
   */
  SOUNDCLR_STATUS_NUMERIC = 3,
  SOUNDCLR_STATUS_NULL_POINTER = 4,
  /**
   * The output buffer is too small; the required size was still reported.
   */
  SOUNDCLR_STATUS_BUFFER_TOO_SMALL = 5,
  SOUNDCLR_STATUS_PANIC = 6,
} SoundclrStatus;

/**
 * Trained model together with the feature settings it was trained with.
 */
typedef struct SoundclrModel SoundclrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *soundclr_version(void);

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call into the library on this
 * thread.
 */
const char *soundclr_last_error(void);

/**
 * Loads a checkpoint. `sample_rate` is the rate the model's training clips
 * were featurized at; audio passed to [`soundclr_model_predict`] is
 * resampled to it.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SoundclrStatus soundclr_model_load(const char *path,
                                        uint32_t sample_rate,
                                        struct SoundclrModel **out);

/**
 * Releases a handle from [`soundclr_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not used afterwards.
 */
void soundclr_model_free(struct SoundclrModel *model);

/**
 * Number of classes the model predicts, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t soundclr_model_num_classes(const struct SoundclrModel *model);

/**
 * Class probabilities for one mono clip. The clip is resampled to the
 * model's rate, peak-normalized and fit to the training length.
 *
 * # Safety
 * `samples` must hold `len` values and `probs` room for `capacity` values.
 */
enum SoundclrStatus soundclr_model_predict(const struct SoundclrModel *model,
                                           const double *samples,
                                           size_t len,
                                           uint32_t sample_rate,
                                           double *probs,
                                           size_t capacity);

/**
 * Log-mel spectrogram with the default analysis settings, written
 * row-major (mel band by frame) into `out`. The dimensions are always
 * stored in `rows` and `cols`; pass a null `out` to query them.
 *
 * # Safety
 * `samples` must hold `len` values, `out` room for `capacity` values, and
 * `rows`/`cols` must be writable.
 */
enum SoundclrStatus soundclr_log_mel(const double *samples,
                                     size_t len,
                                     uint32_t sample_rate,
                                     double *out,
                                     size_t capacity,
                                     size_t *rows,
                                     size_t *cols);

/**
 * Supervised contrastive loss of `n` unit-norm rows of width `dim`.
 * When `grad` is not null it receives the `n * dim` gradient.
 *
 * # Safety
 * `z` must hold `n * dim` values, `labels` `n` values, `loss` must be
 * writable, and `grad` null or room for `n * dim` values.
 */
enum SoundclrStatus soundclr_sup_contrastive(const double *z,
                                             size_t n,
                                             size_t dim,
                                             const size_t *labels,
                                             double tau,
                                             bool self_in_numerator,
                                             double *loss,
                                             double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOUNDCLR_H */
