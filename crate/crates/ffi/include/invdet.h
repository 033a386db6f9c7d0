#ifndef INVDET_H
#define INVDET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum InvdetStatus {
  INVDET_STATUS_OK = 0,
  INVDET_STATUS_NULL_POINTER = 1,
  INVDET_STATUS_INVALID_ARGUMENT = 2,
  INVDET_STATUS_IO = 3,
  INVDET_STATUS_FORMAT = 4,
  INVDET_STATUS_DOMAIN = 5,
  INVDET_STATUS_PANIC = 6,
} InvdetStatus;

// A loaded classifier.
typedef struct InvdetClassifier InvdetClassifier;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the
// next failing call on the same thread.
const char *invdet_last_error_message(void);

// Loads a classifier checkpoint. On success `*out` owns a handle that must
// be released with [`invdet_classifier_free`].
//
// # Safety
// `path` must be a nul-terminated string and `out` a writable pointer.
enum InvdetStatus invdet_classifier_load(const char *path, struct InvdetClassifier **out);

// # Safety
// `handle` must come from [`invdet_classifier_load`] and not be freed twice.
void invdet_classifier_free(struct InvdetClassifier *handle);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `handle` must be null or a live handle.
size_t invdet_classifier_num_classes(const struct InvdetClassifier *handle);

// Writes the expected `[channels, height, width]` into `out`.
//
// # Safety
// `out` must point to three writable `size_t`.
enum InvdetStatus invdet_classifier_input_shape(const struct InvdetClassifier *handle, size_t *out);

// Raw logits for one image. `out` must hold `out_len >= num_classes` values.
//
// # Safety
// `pixels` must point to `len` doubles, `out` to `out_len`.
enum InvdetStatus invdet_classifier_logits(const struct InvdetClassifier *handle,
                                           const double *pixels,
                                           size_t len,
                                           double *out,
                                           size_t out_len);

// Predicted class of one image.
//
// # Safety
// `pixels` must point to `len` doubles and `out` be writable.
enum InvdetStatus invdet_classifier_predict(const struct InvdetClassifier *handle,
                                            const double *pixels,
                                            size_t len,
                                            size_t *out);

// D_KL score of one image under `transform` (e.g. `"hflip"`, `"gamma:0.6"`,
// `"zoom:1.05"`) at softmax temperature `temperature`.
//
// # Safety
// `transform` must be nul-terminated, `pixels` must point to `len` doubles.
enum InvdetStatus invdet_dkl_score(const struct InvdetClassifier *handle,
                                   const double *pixels,
                                   size_t len,
                                   const char *transform,
                                   double temperature,
                                   double *out);

// One minus the top softmax probability.
//
// # Safety
// `pixels` must point to `len` doubles.
enum InvdetStatus invdet_msr_score(const struct InvdetClassifier *handle,
                                   const double *pixels,
                                   size_t len,
                                   double *out);

// KL(p ‖ q) for two distributions of length `n`.
//
// # Safety
// `p` and `q` must point to `n` doubles.
enum InvdetStatus invdet_kl_divergence(const double *p, const double *q, size_t n, double *out);

// AUROC of `scores` where nonzero `positive[i]` marks an error.
//
// # Safety
// `scores` and `positive` must point to `n` values.
enum InvdetStatus invdet_auroc(const double *scores,
                               const uint8_t *positive,
                               size_t n,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INVDET_H */
