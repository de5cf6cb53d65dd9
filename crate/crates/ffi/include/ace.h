#ifndef ACE_H
#define ACE_H

#include <stddef.h>
#include <stdint.h>

/*
 Result codes.
 */
typedef enum AceStatus {
  ACE_STATUS_OK = 0,
  ACE_STATUS_NULL_POINTER = 1,
  ACE_STATUS_INVALID_ARGUMENT = 2,
  ACE_STATUS_IO = 3,
  ACE_STATUS_FORMAT = 4,
  ACE_STATUS_DATA = 5,
  ACE_STATUS_RUNTIME = 6,
  ACE_STATUS_PANIC = 7,
} AceStatus;

/*
 A loaded checkpoint.
 */
typedef struct AceModel AceModel;

/*
 Loads a checkpoint file. On success `*out` owns a new handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AceStatus ace_model_load(const char *path, struct AceModel **out);

/*
 Releases a handle. NULL is ignored.

 # Safety
 `model` must come from `ace_model_load` and not be used afterwards.
 */
void ace_model_free(struct AceModel *model);

/*
 Number of features, or 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t ace_model_num_features(const struct AceModel *model);

/*
 Autoregressive `log p(x_u | x_o)` in original units, where `o` holds the
 features with `observed[i] != 0` and `u` the other non-NaN features.
 Writes the energy estimate to `*out_energy` and the proposal-only value
 to `*out_proposal` (either may be NULL).

 # Safety
 `values` and `observed` must point to `len` elements.
 */
enum AceStatus ace_log_likelihood(const struct AceModel *model,
                                  const double *values,
                                  const uint8_t *observed,
                                  size_t len,
                                  size_t samples,
                                  uint64_t seed,
                                  double *out_energy,
                                  double *out_proposal);

/*
 Replaces NaN cells of `values` with conditional means (modes for
 categorical features) given the other cells.

 # Safety
 `values` must point to `len` writable elements.
 */
enum AceStatus ace_impute(const struct AceModel *model,
                          double *values,
                          size_t len,
                          size_t samples,
                          uint64_t seed);

/*
 Replaces NaN cells of `values` with one joint sample given the other
 cells. `candidates` is the resampling pool per step; 1 samples the
 proposal directly.

 # Safety
 `values` must point to `len` writable elements.
 */
enum AceStatus ace_sample(const struct AceModel *model,
                          double *values,
                          size_t len,
                          size_t candidates,
                          uint64_t seed);

/*
 Message for the last failure on this thread, or NULL. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *ace_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *ace_version(void);

#endif  /* ACE_H */
