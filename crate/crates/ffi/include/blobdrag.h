#ifndef BLOBDRAG_H
#define BLOBDRAG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BdStatus {
  BD_STATUS_OK = 0,
  BD_STATUS_NULL_POINTER = 1,
  BD_STATUS_INVALID_ARGUMENT = 2,
  BD_STATUS_SHAPE_MISMATCH = 3,
  BD_STATUS_DEGENERATE_MASK = 4,
  BD_STATUS_INVALID_STEP = 5,
  BD_STATUS_VALIDATION = 6,
  BD_STATUS_IO = 7,
  BD_STATUS_FORMAT = 8,
  BD_STATUS_CHECK_FAILED = 9,
  BD_STATUS_PANIC = 10,
} BdStatus;

/**
 * Opaque binary mask.
 */
typedef struct BdMask BdMask;

/**
 * Opaque noise schedule.
 */
typedef struct BdSchedule BdSchedule;

/**
 * Tilted ellipse: center, semi-axes, rotation in radians.
 */
typedef struct BdBlobParams {
  double cx;
  double cy;
  double a;
  double b;
  double theta;
} BdBlobParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the length the full message
 * needs including the NUL, or 0 when there is no error.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t bd_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bd_version(void);

/**
 * Creates an all-false `height x width` mask.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum BdStatus bd_mask_new(size_t height, size_t width, struct BdMask **out);

/**
 * Creates a mask from `height * width` row-major bytes; nonzero is true.
 *
 * # Safety
 * `bits` must be valid for `height * width` bytes; `out` for writes.
 */
enum BdStatus bd_mask_from_bytes(size_t height,
                                 size_t width,
                                 const uint8_t *bits,
                                 struct BdMask **out);

/**
 * Releases a mask; null is ignored.
 *
 * # Safety
 * `mask` must be null or a handle from this library not yet freed.
 */
void bd_mask_free(struct BdMask *mask);

/**
 * # Safety
 * `mask` must be a live handle; `height`, `width` valid for writes.
 */
enum BdStatus bd_mask_dims(const struct BdMask *mask, size_t *height, size_t *width);

/**
 * # Safety
 * `mask` must be a live handle; `area` valid for writes.
 */
enum BdStatus bd_mask_area(const struct BdMask *mask, size_t *area);

/**
 * Copies the mask as row-major 0/1 bytes into `buf` of length `len`.
 *
 * # Safety
 * `mask` must be a live handle; `buf` valid for `len` bytes.
 */
enum BdStatus bd_mask_copy_bytes(const struct BdMask *mask, uint8_t *buf, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for writes.
 */
enum BdStatus bd_mask_read_pgm(const char *path, struct BdMask **out);

/**
 * # Safety
 * `mask` must be a live handle; `path` a NUL-terminated string.
 */
enum BdStatus bd_mask_write_pgm(const struct BdMask *mask, const char *path);

/**
 * Rasterizes an ellipse by pixel-center membership.
 *
 * # Safety
 * `params` must be readable; `out` valid for writes.
 */
enum BdStatus bd_rasterize(const struct BdBlobParams *params,
                           size_t height,
                           size_t width,
                           struct BdMask **out);

/**
 * # Safety
 * `a`, `b` must be live handles; `out` valid for writes.
 */
enum BdStatus bd_mask_iou(const struct BdMask *a, const struct BdMask *b, double *out);

/**
 * Fits an ellipse maximizing IoU with the mask.
 *
 * # Safety
 * `mask` must be a live handle; `out` valid for writes.
 */
enum BdStatus bd_fit_ellipse(const struct BdMask *mask, struct BdBlobParams *out);

/**
 * Dilation with a `k x k` square; `k` must be odd.
 *
 * # Safety
 * `mask` must be a live handle; `out` valid for writes.
 */
enum BdStatus bd_dilate(const struct BdMask *mask, size_t k, struct BdMask **out);

/**
 * Linear-beta schedule with `steps` steps.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum BdStatus bd_schedule_new(size_t steps,
                              double beta_start,
                              double beta_end,
                              struct BdSchedule **out);

/**
 * # Safety
 * `schedule` must be null or a handle from this library not yet freed.
 */
void bd_schedule_free(struct BdSchedule *schedule);

/**
 * Cumulative signal fraction at step `t` (1 at `t = 0`).
 *
 * # Safety
 * `schedule` must be a live handle; `out` valid for writes.
 */
enum BdStatus bd_schedule_alpha_bar(const struct BdSchedule *schedule, size_t t, double *out);

/**
 * `f * O_s + (1 - f) * O_d` with `f = t / total`, over `rows x cols`
 * buffers. `out` may alias neither input.
 *
 * # Safety
 * All buffers must hold `rows * cols` doubles.
 */
enum BdStatus bd_soft_anchor(const double *o_s,
                             const double *o_d,
                             size_t rows,
                             size_t cols,
                             size_t t,
                             size_t total,
                             double *out);

/**
 * Nearest-neighbor copy over `(height * width) x channels` feature buffers;
 * masks are at `height x width`.
 *
 * # Safety
 * Buffers must hold `height * width * channels` doubles; masks must be live.
 */
enum BdStatus bd_nn_copy(const double *o_a,
                         const double *o_s,
                         size_t height,
                         size_t width,
                         size_t channels,
                         const struct BdMask *dest_region,
                         const struct BdMask *src_region,
                         double *out);

/**
 * KID between `m` real and `n` fake embeddings of dimension `dim`, each set
 * a row-major `count x dim` buffer.
 *
 * # Safety
 * Buffers must hold `m * dim` and `n * dim` doubles; `out` valid for writes.
 */
enum BdStatus bd_kid(const double *real,
                     size_t m,
                     const double *fake,
                     size_t n,
                     size_t dim,
                     double *out);

/**
 * Runs the `edit` command. `config` may be null for defaults.
 *
 * # Safety
 * Non-null arguments must be NUL-terminated strings.
 */
enum BdStatus bd_run_edit(const char *scene,
                          const char *drag,
                          const char *config,
                          const char *out_dir);

/**
 * Runs the self-checking demo into `out_dir`.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
enum BdStatus bd_run_demo(uint64_t seed, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLOBDRAG_H */
