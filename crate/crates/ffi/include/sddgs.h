#ifndef SDDGS_H
#define SDDGS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. The nonzero engine codes match the CLI exit codes.
 */
typedef enum SddgsStatus {
  SDDGS_STATUS_OK = 0,
  /**
   * Missing or unreadable file.
   */
  SDDGS_STATUS_IO = 2,
  /**
   * Malformed input or violated precondition.
   */
  SDDGS_STATUS_SCHEMA = 3,
  /**
   * Non-finite value during optimization.
   */
  SDDGS_STATUS_NON_FINITE = 4,
  /**
   * A required pointer argument was null.
   */
  SDDGS_STATUS_NULL_ARGUMENT = 10,
  /**
   * A string argument was not valid UTF-8.
   */
  SDDGS_STATUS_INVALID_UTF8 = 11,
  /**
   * An output buffer was too small.
   */
  SDDGS_STATUS_BUFFER_TOO_SMALL = 12,
  /**
   * Internal panic; the engine state behind the handles is unchanged.
   */
  SDDGS_STATUS_PANIC = 13,
} SddgsStatus;

/**
 * Which primitives to render.
 */
typedef enum SddgsSubset {
  SDDGS_SUBSET_FULL = 0,
  SDDGS_SUBSET_STATIC = 1,
  SDDGS_SUBSET_DYNAMIC = 2,
} SddgsSubset;

typedef struct SddgsCamera SddgsCamera;

typedef struct SddgsImage SddgsImage;

typedef struct SddgsScene SddgsScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *sddgs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sddgs_version(void);

/**
 * Loads a scene JSON document or a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SddgsStatus sddgs_scene_load(const char *path, struct SddgsScene **out);

/**
 * Writes a scene JSON document.
 *
 * # Safety
 * `scene` must come from this library; `path` must be NUL-terminated.
 */
enum SddgsStatus sddgs_scene_save(const struct SddgsScene *scene, const char *path);

/**
 * # Safety
 * `scene` must come from this library or be null; it is invalid afterwards.
 */
void sddgs_scene_free(struct SddgsScene *scene);

/**
 * Number of primitives; 0 for a null handle.
 *
 * # Safety
 * `scene` must come from this library or be null.
 */
size_t sddgs_scene_len(const struct SddgsScene *scene);

/**
 * Copies the dynamic coefficients into `out`, which holds `capacity`
 * values.
 *
 * # Safety
 * `out` must point to `capacity` writable doubles.
 */
enum SddgsStatus sddgs_scene_dynamic_coefficients(const struct SddgsScene *scene,
                                                  double *out,
                                                  size_t capacity);

/**
 * Inference-mode split: counts of dynamic (`w > tau_d`), static
 * (`w < tau_s`) and unassigned primitives. Any output pointer may be null.
 *
 * # Safety
 * Non-null output pointers must be writable.
 */
enum SddgsStatus sddgs_scene_partition_counts(const struct SddgsScene *scene,
                                              double tau_d,
                                              double tau_s,
                                              size_t *dynamic,
                                              size_t *static_,
                                              size_t *unassigned);

/**
 * New scene holding the dynamic or static part of an inference-mode split.
 * `SDDGS_SUBSET_FULL` copies the scene.
 *
 * # Safety
 * `scene` must come from this library; `out` must be writable.
 */
enum SddgsStatus sddgs_scene_extract(const struct SddgsScene *scene,
                                     enum SddgsSubset subset,
                                     double tau_d,
                                     double tau_s,
                                     struct SddgsScene **out);

/**
 * Loads a camera JSON record.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum SddgsStatus sddgs_camera_load(const char *path, struct SddgsCamera **out);

/**
 * Pinhole camera at `eye` looking at `target`; `up` is the world up
 * direction. Arrays hold three doubles.
 *
 * # Safety
 * The arrays must hold three readable doubles; `out` must be writable.
 */
enum SddgsStatus sddgs_camera_look_at(uint32_t width,
                                      uint32_t height,
                                      double focal,
                                      const double *eye,
                                      const double *target,
                                      const double *up,
                                      struct SddgsCamera **out);

/**
 * # Safety
 * `camera` must come from this library or be null.
 */
void sddgs_camera_free(struct SddgsCamera *camera);

/**
 * Renders `scene` at time `t`. The static and dynamic subsets use the
 * training-mode split at `tau`.
 *
 * # Safety
 * Handles must come from this library; `background` holds three doubles
 * or is null (black); `out` must be writable.
 */
enum SddgsStatus sddgs_render(const struct SddgsScene *scene,
                              const struct SddgsCamera *camera,
                              double t,
                              enum SddgsSubset subset,
                              double tau,
                              const double *background,
                              struct SddgsImage **out);

/**
 * # Safety
 * `image` must come from this library or be null.
 */
size_t sddgs_image_width(const struct SddgsImage *image);

/**
 * # Safety
 * `image` must come from this library or be null.
 */
size_t sddgs_image_height(const struct SddgsImage *image);

/**
 * Pointer to `width * height * 3` row-major RGB doubles, owned by the
 * image. Null for a null handle.
 *
 * # Safety
 * `image` must come from this library or be null.
 */
const double *sddgs_image_data(const struct SddgsImage *image);

/**
 * Writes an 8-bit PNG.
 *
 * # Safety
 * `image` must come from this library; `path` must be NUL-terminated.
 */
enum SddgsStatus sddgs_image_save_png(const struct SddgsImage *image, const char *path);

/**
 * # Safety
 * `image` must come from this library or be null.
 */
void sddgs_image_free(struct SddgsImage *image);

/**
 * Generates a synthetic dataset directory. `spec_json` is a JSON object
 * with any subset of the spec fields, or null for the defaults.
 *
 * # Safety
 * Strings must be NUL-terminated.
 */
enum SddgsStatus sddgs_generate_dataset(const char *spec_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDDGS_H */
