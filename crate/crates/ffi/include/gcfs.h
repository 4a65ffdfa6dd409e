#ifndef GCFS_H
#define GCFS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum GcfsStatus {
  GCFS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  GCFS_STATUS_NULL_POINTER = 1,
  /**
   * Arguments or file contents failed validation.
   */
  GCFS_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Reading or writing a file failed.
   */
  GCFS_STATUS_IO = 3,
  /**
   * Caller-provided buffer is too small; the required size was written back.
   */
  GCFS_STATUS_BUFFER_TOO_SMALL = 4,
  /**
   * Computation failed after validation.
   */
  GCFS_STATUS_RUNTIME = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  GCFS_STATUS_PANIC = 6,
} GcfsStatus;

/**
 * Opaque Watts-Strogatz graph.
 */
typedef struct GcfsGraph GcfsGraph;

/**
 * Opaque trained model restored from a checkpoint.
 */
typedef struct GcfsModel GcfsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *gcfs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gcfs_version(void);

/**
 * Generates a WS graph with `nodes` nodes, even mean degree `degree` and
 * rewiring probability `rho`.
 */
enum GcfsStatus gcfs_graph_generate(uintptr_t nodes,
                                    uintptr_t degree,
                                    double rho,
                                    uint64_t seed,
                                    struct GcfsGraph **out);

/**
 * Loads an edge-list file.
 */
enum GcfsStatus gcfs_graph_load(const char *path, struct GcfsGraph **out);

enum GcfsStatus gcfs_graph_save(const struct GcfsGraph *graph, const char *path);

/**
 * Node count, or 0 for a null handle.
 */
uintptr_t gcfs_graph_node_count(const struct GcfsGraph *graph);

/**
 * Edge count, or 0 for a null handle.
 */
uintptr_t gcfs_graph_edge_count(const struct GcfsGraph *graph);

/**
 * Writes edges as `i0, j0, i1, j1, ...` with `i < j`, sorted.
 * `capacity` counts values (twice the edge count).
 */
enum GcfsStatus gcfs_graph_edges(const struct GcfsGraph *graph,
                                 uintptr_t *buf,
                                 uintptr_t capacity,
                                 uintptr_t *written);

/**
 * Writes the row-major `n x n` renormalized aggregator.
 */
enum GcfsStatus gcfs_graph_aggregator(const struct GcfsGraph *graph,
                                      double *buf,
                                      uintptr_t capacity,
                                      uintptr_t *written);

void gcfs_graph_free(struct GcfsGraph *graph);

/**
 * PSNR in dB between two images of identical dimensions.
 */
enum GcfsStatus gcfs_psnr(const double *a,
                          const double *b,
                          uintptr_t width,
                          uintptr_t height,
                          uintptr_t channels,
                          double peak,
                          double *out);

/**
 * Mean SSIM on luma. `global_fallback` (may be null) is set to 1 when the
 * image is smaller than the 11x11 window.
 */
enum GcfsStatus gcfs_ssim(const double *a,
                          const double *b,
                          uintptr_t width,
                          uintptr_t height,
                          uintptr_t channels,
                          double *out,
                          int32_t *global_fallback);

/**
 * Restores the model stored in a training checkpoint.
 */
enum GcfsStatus gcfs_model_load(const char *path, struct GcfsModel **out);

/**
 * Output size per input pixel side: 1 for deblurring, the scale for SR.
 */
uintptr_t gcfs_model_magnification(const struct GcfsModel *model);

/**
 * Restores one image. `output` receives `channels x (height*s) x (width*s)`
 * values where `s` is [`gcfs_model_magnification`].
 */
enum GcfsStatus gcfs_model_infer(const struct GcfsModel *model,
                                 const double *input,
                                 uintptr_t width,
                                 uintptr_t height,
                                 uintptr_t channels,
                                 double *output,
                                 uintptr_t capacity,
                                 uintptr_t *written);

void gcfs_model_free(struct GcfsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GCFS_H */
