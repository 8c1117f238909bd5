#ifndef DRASMIL_H
#define DRASMIL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum DrasStatus {
  DRAS_STATUS_OK = 0,
  DRAS_STATUS_NULL_POINTER = 1,
  DRAS_STATUS_INVALID_ARGUMENT = 2,
  DRAS_STATUS_IO = 3,
  DRAS_STATUS_CORRUPT = 4,
  DRAS_STATUS_SHAPE = 5,
  DRAS_STATUS_CONFIG = 6,
  DRAS_STATUS_EMPTY_BAG = 7,
  DRAS_STATUS_INTERNAL = 8,
} DrasStatus;

/*
 Evaluation strategy.
 */
typedef enum DrasMethod {
  DRAS_METHOD_FULL = 0,
  DRAS_METHOD_RANDOM = 1,
  DRAS_METHOD_ACTIVE = 2,
} DrasMethod;

/*
 Opaque bag of patch features.
 */
typedef struct DrasBag DrasBag;

/*
 Opaque trained model.
 */
typedef struct DrasModel DrasModel;

/*
 Active-sampling settings. `dras_sampling_default` fills in the tuned
 defaults. For `DRAS_METHOD_RANDOM` only `total_budget` is used.
 */
typedef struct DrasSamplingConfig {
  size_t total_budget;
  size_t iterations;
  size_t final_extra;
  size_t neighbours;
  double random_rate;
  double random_delta;
} DrasSamplingConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or "" after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *dras_last_error(void);

/*
 Tuned defaults: 800 patches, 10 iterations, 160 final, 64 neighbours,
 random rate 0.29 decaying by 0.36 per iteration.
 */
struct DrasSamplingConfig dras_sampling_default(void);

/*
 Load a checkpoint written by `drasmil train`.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DrasStatus dras_model_load(const char *path, struct DrasModel **out);

/*
 # Safety
 `model` must come from `dras_model_load` and not be freed twice. Null is ignored.
 */
void dras_model_free(struct DrasModel *model);

/*
 Feature width the model expects, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t dras_model_embedding_dim(const struct DrasModel *model);

/*
 Load a feature cache written by `drasmil synth` or `drasmil patch`.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DrasStatus dras_bag_load(const char *path, struct DrasBag **out);

/*
 Build a bag from `k` grid coordinates (`x0, y0, x1, y1, ...`) and a
 row-major `k × m` feature matrix. Both arrays are copied.

 # Safety
 `coords` must hold `2k` values and `features` `k·m` values; `out` must be writable.
 */
enum DrasStatus dras_bag_new(const uint32_t *coords,
                             const double *features,
                             size_t k,
                             size_t m,
                             uint8_t label,
                             struct DrasBag **out);

/*
 # Safety
 `bag` must come from `dras_bag_load`/`dras_bag_new` and not be freed twice. Null is ignored.
 */
void dras_bag_free(struct DrasBag *bag);

/*
 Number of patches, or 0 for a null handle.

 # Safety
 `bag` must be null or a live handle.
 */
size_t dras_bag_len(const struct DrasBag *bag);

/*
 Positive-class probability of `bag`. `config` may be null for defaults.

 # Safety
 Handles must be live; `config` null or valid; `probability` writable.
 */
enum DrasStatus dras_evaluate(const struct DrasModel *model,
                              const struct DrasBag *bag,
                              enum DrasMethod method,
                              const struct DrasSamplingConfig *config,
                              uint64_t seed,
                              double *probability);

/*
 Per-patch attention of one evaluation (0 for patches never sampled),
 written to `out`, which must hold exactly `dras_bag_len(bag)` values.
 Also returns the probability when `probability` is non-null.

 # Safety
 Handles must be live; `out` must hold `out_len` writable doubles.
 */
enum DrasStatus dras_attention_map(const struct DrasModel *model,
                                   const struct DrasBag *bag,
                                   enum DrasMethod method,
                                   const struct DrasSamplingConfig *config,
                                   uint64_t seed,
                                   double *out,
                                   size_t out_len,
                                   double *probability);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRASMIL_H */
