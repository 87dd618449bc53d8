#ifndef SLOTBERT_H
#define SLOTBERT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlotbertStatus {
  SLOTBERT_STATUS_OK = 0,
  SLOTBERT_STATUS_NULL_POINTER = 1,
  SLOTBERT_STATUS_INVALID_ARGUMENT = 2,
  SLOTBERT_STATUS_IO = 3,
  SLOTBERT_STATUS_FORMAT = 4,
  SLOTBERT_STATUS_SHAPE = 5,
  SLOTBERT_STATUS_NON_FINITE = 6,
  SLOTBERT_STATUS_CONFIG = 7,
  SLOTBERT_STATUS_CHECKSUM = 8,
  SLOTBERT_STATUS_BUFFER_TOO_SMALL = 9,
  SLOTBERT_STATUS_PANIC = 99,
} SlotbertStatus;

typedef enum SlotbertInitMode {
  SLOTBERT_INIT_MODE_RNN = 0,
  SLOTBERT_INIT_MODE_PREDICT = 1,
} SlotbertInitMode;

typedef enum SlotbertMatching {
  SLOTBERT_MATCHING_BEST_OVERLAP = 0,
  SLOTBERT_MATCHING_HUNGARIAN = 1,
} SlotbertMatching;

/**
 * A video clip, optionally with ground-truth masks.
 */
typedef struct SlotbertClip SlotbertClip;

/**
 * Soft slot masks for every frame of a clip.
 */
typedef struct SlotbertMasks SlotbertMasks;

/**
 * A loaded checkpoint.
 */
typedef struct SlotbertModel SlotbertModel;

typedef struct SlotbertModelInfo {
  size_t num_slots;
  size_t slot_dim;
  size_t window;
  size_t image_height;
  size_t image_width;
  size_t channels;
  size_t patch_size;
} SlotbertModelInfo;

typedef struct SlotbertInferOptions {
  /**
   * Sliding-window stride for clips longer than the trained window.
   */
  size_t stride;
  enum SlotbertInitMode init_mode;
  /**
   * Seed for the slot initialization noise.
   */
  uint64_t seed;
} SlotbertInferOptions;

typedef struct SlotbertMaskShape {
  size_t frames;
  size_t height;
  size_t width;
  size_t num_slots;
  size_t grid_height;
  size_t grid_width;
} SlotbertMaskShape;

/**
 * Clip scores. Metrics that are undefined for the clip are NaN.
 */
typedef struct SlotbertMetrics {
  double fg_ari;
  double mbo_v;
  double mbo_f;
  double mbhd;
  double corloc;
} SlotbertMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *slotbert_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into the library on this thread.
 */
const char *slotbert_last_error(void);

enum SlotbertStatus slotbert_model_load(const char *path, struct SlotbertModel **out);

void slotbert_model_free(struct SlotbertModel *model);

enum SlotbertStatus slotbert_model_info(const struct SlotbertModel *model,
                                        struct SlotbertModelInfo *out);

/**
 * Builds a clip from `T x H x W x 3` RGB bytes. `masks` may be NULL;
 * otherwise it holds `T x H x W` instance ids with 0 as background.
 */
enum SlotbertStatus slotbert_clip_from_rgb8(const char *clip_id,
                                            size_t frames,
                                            size_t height,
                                            size_t width,
                                            const uint8_t *rgb,
                                            const uint32_t *masks,
                                            struct SlotbertClip **out);

/**
 * Reads a clip directory with `frames/NNNN.png` and optional `masks/NNNN.png`.
 */
enum SlotbertStatus slotbert_clip_load_dir(const char *dir, struct SlotbertClip **out);

void slotbert_clip_free(struct SlotbertClip *clip);

/**
 * Segments a clip. Clips longer than the trained window use sliding
 * windows with the given stride and initialization mode.
 */
enum SlotbertStatus slotbert_infer(const struct SlotbertModel *model,
                                   const struct SlotbertClip *clip,
                                   struct SlotbertInferOptions options,
                                   struct SlotbertMasks **out);

void slotbert_masks_free(struct SlotbertMasks *masks);

enum SlotbertStatus slotbert_masks_shape(const struct SlotbertMasks *masks,
                                         struct SlotbertMaskShape *out);

/**
 * Writes `T x H x W` pixel labels (slot index + 1) into `out`.
 */
enum SlotbertStatus slotbert_masks_labels(const struct SlotbertMasks *masks,
                                          uint32_t *out,
                                          size_t len);

/**
 * Writes frame `frame`'s `K x N` soft masks (slot-major) into `out`.
 */
enum SlotbertStatus slotbert_masks_soft(const struct SlotbertMasks *masks,
                                        size_t frame,
                                        float *out,
                                        size_t len);

/**
 * Writes label PNGs, optional soft masks and a manifest under `dir`.
 */
enum SlotbertStatus slotbert_masks_export(const struct SlotbertMasks *masks,
                                          const char *clip_id,
                                          const char *dir,
                                          bool soft);

/**
 * Scores masks against the clip's ground truth.
 */
enum SlotbertStatus slotbert_evaluate(const struct SlotbertMasks *masks,
                                      const struct SlotbertClip *clip,
                                      enum SlotbertMatching matching,
                                      struct SlotbertMetrics *out);

/**
 * Renders a synthetic dataset. `spec_json` may be NULL for the default
 * spec. The number of clips written is stored in `clips` if non-NULL.
 */
enum SlotbertStatus slotbert_generate_dataset(const char *spec_json,
                                              const char *out_dir,
                                              size_t *clips);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLOTBERT_H */
