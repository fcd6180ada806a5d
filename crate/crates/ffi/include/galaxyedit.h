#ifndef GALAXYEDIT_H
#define GALAXYEDIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GxStatus {
  GX_STATUS_OK = 0,
  GX_STATUS_NULL_POINTER = 1,
  GX_STATUS_INVALID_ARGUMENT = 2,
  GX_STATUS_SHAPE = 3,
  GX_STATUS_CONFIG = 4,
  GX_STATUS_IO = 5,
  GX_STATUS_NON_FINITE = 6,
  GX_STATUS_INTERNAL = 7,
  GX_STATUS_PANIC = 8,
} GxStatus;

// Second-order Volterra layer in double precision with "same" padding.
typedef struct GxVolterraLayer GxVolterraLayer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Owned by the
// library; valid until the next failing call on the thread.
const char *gx_last_error(void);

// Library version as a static NUL-terminated string.
const char *gx_version(void);

// All-zero layer with `c_out·c_in·k²·(1+2Q)` parameters.
//
// # Safety
// `out` must be valid for a pointer write.
enum GxStatus gx_volterra_new_zero(size_t c_in,
                                   size_t c_out,
                                   size_t kernel,
                                   size_t rank_q,
                                   struct GxVolterraLayer **out);

// Layer with independent Gaussian weights of standard deviation `std`.
//
// # Safety
// `out` must be valid for a pointer write.
enum GxStatus gx_volterra_new_random(size_t c_in,
                                     size_t c_out,
                                     size_t kernel,
                                     size_t rank_q,
                                     double std,
                                     uint64_t seed,
                                     struct GxVolterraLayer **out);

// Layer from explicit weights laid out as `W1, W2a_1..Q, W2b_1..Q`, each
// `[c_out, c_in, k, k]` row-major.
//
// # Safety
// `weights` must point to `weights_len` doubles; `out` must be writable.
enum GxStatus gx_volterra_from_weights(size_t c_in,
                                       size_t c_out,
                                       size_t kernel,
                                       size_t rank_q,
                                       const double *weights,
                                       size_t weights_len,
                                       struct GxVolterraLayer **out);

// Number of scalar parameters, or 0 for a null layer.
//
// # Safety
// `layer` must be null or come from a `gx_volterra_new*` call.
size_t gx_volterra_param_count(const struct GxVolterraLayer *layer);

// Forward pass on a `[batch, c_in, height, width]` row-major input into a
// `[batch, c_out, height', width']` output buffer of `output_len` doubles.
// With odd kernels the spatial size is unchanged.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum GxStatus gx_volterra_forward(const struct GxVolterraLayer *layer,
                                  const double *input,
                                  size_t batch,
                                  size_t height,
                                  size_t width,
                                  double *output,
                                  size_t output_len);

// # Safety
// `layer` must be null or come from a `gx_volterra_new*` call, and must
// not be used afterwards.
void gx_volterra_free(struct GxVolterraLayer *layer);

// Binary dilation with a `kernel × kernel` square. Nonzero input bytes
// are set; output bytes are 0 or 1. `mask` and `out` may alias.
//
// # Safety
// Both buffers must hold `width·height` bytes.
enum GxStatus gx_dilate(const uint8_t *mask,
                        size_t width,
                        size_t height,
                        size_t kernel,
                        uint8_t *out);

// Canny edges of a luma image in `[0, 1]`; output bytes are 0 or 1.
//
// # Safety
// `luma` must hold `width·height` floats and `out` as many bytes.
enum GxStatus gx_canny(const float *luma,
                       size_t width,
                       size_t height,
                       double low,
                       double high,
                       uint8_t *out);

// Fréchet distance between two row-major sets of `dim`-vectors.
//
// # Safety
// `x` must hold `nx·dim` doubles, `y` `ny·dim`; `out` must be writable.
enum GxStatus gx_frechet_distance(const double *x,
                                  size_t nx,
                                  const double *y,
                                  size_t ny,
                                  size_t dim,
                                  double *out);

// Mean absolute and mean squared difference of two 8-bit buffers, scaled
// to `[0, 1]`.
//
// # Safety
// `a` and `b` must hold `len` bytes; `l1` and `l2` must be writable.
enum GxStatus gx_pixel_distance(const uint8_t *a,
                                const uint8_t *b,
                                size_t len,
                                double *l1,
                                double *l2);

// `"<task> the <label>"`. `task` is 0 for remove, 1 for add.
//
// # Safety
// `label` must be a NUL-terminated string; `out` must be writable.
enum GxStatus gx_simple_instruction(const char *label, uint32_t task, char **out);

// Multi-instance instruction such as `"remove two cars from the right"`.
// `direction` is 0 left, 1 right, 2 top, 3 bottom; ignored for add.
//
// # Safety
// `label` must be a NUL-terminated string; `out` must be writable.
enum GxStatus gx_multi_instance_instruction(const char *label,
                                            size_t k,
                                            uint32_t direction,
                                            uint32_t task,
                                            char **out);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void gx_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GALAXYEDIT_H */
