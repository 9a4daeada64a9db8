/* C interface to the regconv rotation-equivariant kernel library.
 * Generated by cbindgen; do not edit by hand. */

#ifndef REGCONV_H
#define REGCONV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum RegconvStatus {
  RegconvStatusOk = 0,
  RegconvStatusInvalidArgument = 1,
  RegconvStatusNullPointer = 2,
  RegconvStatusPanic = 3,
} RegconvStatus;

/**
 * Backbone model handle (equivariant or plain control).
 */
typedef struct RegconvBackbone RegconvBackbone;

/**
 * Dense row-major f64 tensor handle.
 */
typedef struct RegconvTensor RegconvTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *regconv_version(void);

/**
 * Message for the most recent error on this thread. Valid until the next
 * failing call on the same thread.
 */
const char *regconv_last_error_message(void);

/**
 * Create a tensor from `rank` dimensions and a dense row-major payload.
 * Returns NULL on invalid input.
 *
 * # Safety
 * `dims` must point to `rank` readable `size_t`s and `data` to the product
 * of the dimensions readable doubles.
 */
struct RegconvTensor *regconv_tensor_create(const size_t *dims, size_t rank, const double *data);

/**
 * Number of dimensions of a tensor handle.
 */
size_t regconv_tensor_rank(const struct RegconvTensor *t);

/**
 * Copy the dimensions into `out` (length `rank`).
 *
 * # Safety
 * `out` must have room for `regconv_tensor_rank(t)` values.
 */
enum RegconvStatus regconv_tensor_dims(const struct RegconvTensor *t, size_t *out);

/**
 * Total element count.
 */
size_t regconv_tensor_len(const struct RegconvTensor *t);

/**
 * Copy the payload into `out` (length `len`, which must match
 * `regconv_tensor_len`).
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum RegconvStatus regconv_tensor_copy_data(const struct RegconvTensor *t, double *out, size_t len);

/**
 * Release a tensor handle. NULL is a no-op.
 *
 * # Safety
 * `t` must be a pointer returned by this library and not yet freed.
 */
void regconv_tensor_free(struct RegconvTensor *t);

/**
 * Build a backbone. `kind` is 0 for the rotation-equivariant model, 1 for
 * the plain control; `widths` lists the per-stage base channels.
 *
 * # Safety
 * `widths` must point to `n_stages` readable `size_t`s (it may be NULL when
 * `n_stages` is 0, which builds a stem-only model).
 */
struct RegconvBackbone *regconv_backbone_create(size_t group_order,
                                                const size_t *widths,
                                                size_t n_stages,
                                                size_t fpn_width,
                                                int kind,
                                                uint64_t seed);

/**
 * Release a backbone handle. NULL is a no-op.
 *
 * # Safety
 * `b` must be a pointer returned by `regconv_backbone_create` and not yet
 * freed.
 */
void regconv_backbone_free(struct RegconvBackbone *b);

/**
 * Run the backbone on a `(C, H, W)` image and return pyramid level
 * `level` as a new tensor: `(K, N, H, W)` for the equivariant model,
 * `(C, H, W)` for the plain control.
 *
 * # Safety
 * All handles must be valid; `out` must be a writable pointer slot.
 */
enum RegconvStatus regconv_backbone_forward(const struct RegconvBackbone *b,
                                            const struct RegconvTensor *image,
                                            size_t level,
                                            struct RegconvTensor **out);

/**
 * Rotation-invariant RoI Align over a `(K, N, H, W)` field tensor: spatial
 * alignment of the rotated box followed by orientation alignment with
 * `interp_channels ∈ {1, 2, 4}`. Returns a `(K, N, out_size, out_size)`
 * tensor.
 *
 * # Safety
 * `field` must be a valid tensor handle and `out` a writable pointer slot.
 */
enum RegconvStatus regconv_riroi_align(const struct RegconvTensor *field,
                                       double x,
                                       double y,
                                       double w,
                                       double h,
                                       double theta,
                                       size_t out_size,
                                       size_t samples_per_axis,
                                       size_t interp_channels,
                                       struct RegconvTensor **out);

/**
 * Rotate a `(C, H, W)` tensor counter-clockwise about its center.
 *
 * # Safety
 * `t` must be a valid tensor handle and `out` a writable pointer slot.
 */
enum RegconvStatus regconv_rotate_planar(const struct RegconvTensor *t,
                                         double angle,
                                         struct RegconvTensor **out);

/**
 * Interior relative L2 equivariance error of the backbone for group
 * element `k` on the given image.
 *
 * # Safety
 * Handles must be valid; `out` must point to a writable double.
 */
enum RegconvStatus regconv_equivariance_error(const struct RegconvBackbone *b,
                                              const struct RegconvTensor *image,
                                              size_t k,
                                              double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* REGCONV_H */
