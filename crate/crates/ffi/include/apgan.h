#ifndef APGAN_H
#define APGAN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ApganStatus {
  APGAN_STATUS_OK = 0,
  APGAN_STATUS_NULL_POINTER = 1,
  APGAN_STATUS_INVALID_ARGUMENT = 2,
  APGAN_STATUS_IO = 3,
  APGAN_STATUS_CORRUPT_CHECKPOINT = 4,
  APGAN_STATUS_INTERNAL = 5,
} ApganStatus;

/**
 * A generator restored from a checkpoint.
 */
typedef struct ApganGenerator ApganGenerator;

typedef struct ApganGeneratorInfo {
  /**
   * Side length of generated images.
   */
  uint32_t resolution;
  uint32_t n_classes;
  uint32_t latent_dim;
  /**
   * Training step at which the checkpoint was written.
   */
  uint64_t step;
} ApganGeneratorInfo;

typedef struct ApganSchedule {
  uint32_t stage_index;
  uint32_t resolution;
  double alpha;
  uint32_t batch_size;
  /**
   * 1 while a new stage is fading in.
   */
  uint8_t fading;
} ApganSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null if the last
 * call succeeded. Valid until the next call into this library.
 */
const char *apgan_last_error(void);

/**
 * Loads a checkpoint file and keeps only the generator.
 *
 * # Safety
 * `path` must be a valid nul-terminated string and `out` a valid pointer.
 */
enum ApganStatus apgan_generator_open(const char *path, struct ApganGenerator **out);

/**
 * Releases a generator. Null is ignored.
 *
 * # Safety
 * `g` must come from [`apgan_generator_open`] and not be used afterwards.
 */
void apgan_generator_free(struct ApganGenerator *g);

/**
 * # Safety
 * `g` must be a live handle and `out` a valid pointer.
 */
enum ApganStatus apgan_generator_info(const struct ApganGenerator *g,
                                      struct ApganGeneratorInfo *out);

/**
 * Samples `n` images of the given classes with latent codes drawn from
 * `seed`. `out` receives `n` images, each `H x W x 3` row-major with values
 * in `[0, 1]`; `out_len` must equal `n * H * W * 3`. The same seed and labels
 * always produce the same images.
 *
 * # Safety
 * `labels` must point to `n` values and `out` to `out_len` floats.
 */
enum ApganStatus apgan_generator_sample(const struct ApganGenerator *g,
                                        const uint32_t *labels,
                                        size_t n,
                                        uint64_t seed,
                                        float *out,
                                        size_t out_len);

/**
 * Like [`apgan_generator_sample`] with caller-supplied latent vectors:
 * `z` holds `n * latent_dim` values, one row per image.
 *
 * # Safety
 * `z` must point to `n * latent_dim` floats, `labels` to `n` values and
 * `out` to `out_len` floats.
 */
enum ApganStatus apgan_generator_generate(const struct ApganGenerator *g,
                                          const float *z,
                                          const uint32_t *labels,
                                          size_t n,
                                          float *out,
                                          size_t out_len);

/**
 * Schedule state of the checkpoint's training run after `images_shown`
 * real images.
 *
 * # Safety
 * `g` must be a live handle and `out` a valid pointer.
 */
enum ApganStatus apgan_generator_schedule_at(const struct ApganGenerator *g,
                                             uint64_t images_shown,
                                             struct ApganSchedule *out);

/**
 * Schedule state for a run that grows from 4x4 to `final_resolution` with
 * the full-scale batch sizes (256 at 4x4 down to 8 at 256x256).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ApganStatus apgan_schedule_at(uint64_t images_per_phase,
                                   uint64_t total_images,
                                   uint32_t final_resolution,
                                   uint64_t images_shown,
                                   struct ApganSchedule *out);

/**
 * Simplified non-local attention on one `C x H x W` map (channel-major):
 * one shared softmax over positions of the `w_k` logits, a `C x C` value
 * transform `w_v` (row-major, out x in) and a residual connection.
 *
 * # Safety
 * `x` and `out` must hold `C*H*W` doubles, `w_k` `C`, and `w_v` `C*C`.
 */
enum ApganStatus apgan_snl_forward(const double *x,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   const double *w_k,
                                   const double *w_v,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APGAN_H */
