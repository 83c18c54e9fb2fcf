/* C interface to dquant: weight-only quantization with per-group scales and zeros. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a call. Anything but `Ok` leaves a message in
// `dq_last_error_message`.
typedef enum {
  // The call succeeded.
  DQ_STATUS_OK = 0,
  // A parameter or configuration value was rejected.
  DQ_STATUS_INVALID_ARGUMENT = 1,
  // A file could not be read, written, or decoded.
  DQ_STATUS_IO = 2,
  // A solve failed numerically.
  DQ_STATUS_NUMERICAL = 3,
  // A required pointer was null.
  DQ_STATUS_NULL_POINTER = 4,
  // An internal invariant failed; the unwind was caught at the boundary.
  DQ_STATUS_PANIC = 5,
} DqStatus;

// Damped Gram matrix of calibration activations.
typedef struct DqHessian DqHessian;

// A quantized layer: packed integer codes plus per-group scales and zeros.
// Layers produced by `dq_quantize` also carry the solver's final objective.
typedef struct DqQuantizedLayer DqQuantizedLayer;

// Dense row-major f64 matrix.
typedef struct DqTensor DqTensor;

// Solver settings, mirroring the library configuration field for field.
// Obtain defaults from `dq_quant_options_default` and adjust from there.
typedef struct {
  // Bit width of the integer grid (2, 3, or 4).
  uint8_t bits;
  // Smallest representable integer level.
  int32_t alpha;
  // Largest representable integer level.
  int32_t beta;
  // Scale/zero groups along the input dimension; must divide it.
  uint32_t group_count;
  // Integer-solve approximation: 1 = box-aware PGD, 2 = closed form.
  uint8_t approx_level;
  // Alternation rounds between the integer and scale/zero solves.
  uint32_t rounds;
  // Inner PGD iterations per sequential step (level 1 only).
  uint32_t seq_pgd_iters;
  // Warm-up PGD iterations before the sequential pass (level 1 only).
  uint32_t warmup_pgd_iters;
  // Shrink factors scanned by the grid-search initialization.
  uint32_t grid_points;
  // Smallest shrink factor scanned.
  double grid_shrink_min;
  // Largest shrink factor scanned.
  double grid_shrink_max;
  // Nonzero to search a separate shrink factor per group.
  uint8_t per_group_shrink;
  // Diagonal damping as a fraction of the mean Gram diagonal; recorded
  // in reports, applied when the Hessian is built.
  double damping_fraction;
  // PGD early-stop tolerance on the projected gradient norm.
  double pgd_tolerance;
  // Seed for randomized subroutines; fixed seed means identical output.
  uint64_t seed;
  // Worker threads for per-column parallelism; 0 uses one per core.
  uint32_t workers;
  // Nonzero to pin (scale, zero) to (`fixed_scale`, `fixed_zero`) for
  // every group and skip the analytic scale/zero updates.
  uint8_t use_fixed_sz;
  double fixed_scale;
  double fixed_zero;
} DqQuantOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Returns the message of the most recent failure on this thread. The
// pointer stays valid until the next failing call on the same thread.
// Never null; the message is empty if nothing failed yet.
const char *dq_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *dq_version(void);

// Creates a row-major `rows` x `cols` tensor from `len` doubles.
//
// # Safety
// `data` must point to `len` readable doubles; `out` must be writable.
DqStatus dq_tensor_create(size_t rows, size_t cols, const double *data, size_t len, DqTensor **out);

// Reads a tensor file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
DqStatus dq_tensor_read(const char *path, DqTensor **out);

// Writes a tensor file with an f64 payload.
//
// # Safety
// `path` must be a NUL-terminated string; `tensor` must be a live handle.
DqStatus dq_tensor_write(const char *path, const DqTensor *tensor);

// Row count of a tensor; 0 if the handle is null.
//
// # Safety
// `tensor` must be a live handle or null.
size_t dq_tensor_rows(const DqTensor *tensor);

// Column count of a tensor; 0 if the handle is null.
//
// # Safety
// `tensor` must be a live handle or null.
size_t dq_tensor_cols(const DqTensor *tensor);

// Copies the row-major payload into `out`, which holds `len` doubles;
// `len` must equal rows * cols.
//
// # Safety
// `tensor` must be a live handle; `out` must point to `len` writable doubles.
DqStatus dq_tensor_copy_data(const DqTensor *tensor, double *out, size_t len);

// Releases a tensor handle. Null is a no-op.
//
// # Safety
// `tensor` must have come from this library and not been freed before.
void dq_tensor_free(DqTensor *tensor);

// Accumulates `activations` (batch x features) into a damped Gram matrix.
//
// # Safety
// `activations` must be a live tensor handle; `out` must be writable.
DqStatus dq_hessian_build(const DqTensor *activations, double damping_fraction, DqHessian **out);

// Wraps an already-damped symmetric matrix, e.g. one read from a tensor
// file written by the `dquant hessian` command.
//
// # Safety
// `matrix` must be a live tensor handle; `out` must be writable.
DqStatus dq_hessian_from_matrix(const DqTensor *matrix, DqHessian **out);

// Dimension of the Hessian; 0 if the handle is null.
//
// # Safety
// `hessian` must be a live handle or null.
size_t dq_hessian_dim(const DqHessian *hessian);

// Releases a Hessian handle. Null is a no-op.
//
// # Safety
// `hessian` must have come from this library and not been freed before.
void dq_hessian_free(DqHessian *hessian);

// Fills `out` with the default solver settings for a bit width.
//
// # Safety
// `out` must be writable.
DqStatus dq_quant_options_default(uint8_t bits, DqQuantOptions *out);

// Quantizes a d_in x d_out weight tensor against a d_in x d_in Hessian.
//
// # Safety
// All handles must be live; `out` must be writable.
DqStatus dq_quantize(const DqTensor *weights,
                     const DqHessian *hessian,
                     const DqQuantOptions *options,
                     DqQuantizedLayer **out);

// Reads a quantized-layer file. Layers from files report NaN as their
// total loss because no solve produced them.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
DqStatus dq_layer_read(const char *path, DqQuantizedLayer **out);

// Writes a quantized layer in the packed format.
//
// # Safety
// `path` must be a NUL-terminated string; `layer` must be a live handle.
DqStatus dq_layer_write(const char *path, const DqQuantizedLayer *layer);

// Input dimension (rows of the original weights); 0 if null.
//
// # Safety
// `layer` must be a live handle or null.
size_t dq_layer_d_in(const DqQuantizedLayer *layer);

// Output dimension (columns of the original weights); 0 if null.
//
// # Safety
// `layer` must be a live handle or null.
size_t dq_layer_d_out(const DqQuantizedLayer *layer);

// Bit width of the stored codes; 0 if null.
//
// # Safety
// `layer` must be a live handle or null.
uint8_t dq_layer_bits(const DqQuantizedLayer *layer);

// Scale/zero groups per column; 0 if null.
//
// # Safety
// `layer` must be a live handle or null.
size_t dq_layer_group_count(const DqQuantizedLayer *layer);

// Final solver objective summed over columns; NaN for layers read from
// files or a null handle.
//
// # Safety
// `layer` must be a live handle or null.
double dq_layer_total_loss(const DqQuantizedLayer *layer);

// Columns that fell back to an earlier iterate after a singular analytic
// solve; 0 if null or read from a file.
//
// # Safety
// `layer` must be a live handle or null.
size_t dq_layer_flagged_columns(const DqQuantizedLayer *layer);

// Copies column `column`'s unpacked integer codes into `out` (`len` must
// equal the input dimension).
//
// # Safety
// `layer` must be a live handle; `out` must point to `len` writable i32.
DqStatus dq_layer_copy_codes(const DqQuantizedLayer *layer,
                             size_t column,
                             int32_t *out,
                             size_t len);

// Copies column `column`'s scales and zero points into two buffers of
// `len` floats each; `len` must equal the group count.
//
// # Safety
// `layer` must be a live handle; both buffers must hold `len` writable f32.
DqStatus dq_layer_copy_scales_zeros(const DqQuantizedLayer *layer,
                                    size_t column,
                                    float *scales_out,
                                    float *zeros_out,
                                    size_t len);

// Reconstructs the full d_in x d_out floating-point weight matrix.
//
// # Safety
// `layer` must be a live handle; `out` must be writable.
DqStatus dq_layer_dequantize(const DqQuantizedLayer *layer, DqTensor **out);

// Releases a layer handle. Null is a no-op.
//
// # Safety
// `layer` must have come from this library and not been freed before.
void dq_layer_free(DqQuantizedLayer *layer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
