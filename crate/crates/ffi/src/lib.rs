//! C ABI for the quantization library.
//!
//! Every object crosses the boundary as an opaque handle created and
//! destroyed by this library; every fallible call returns a [`DqStatus`] and
//! leaves a UTF-8 description of the failure in a thread-local buffer
//! readable through [`dq_last_error_message`]. The C header in
//! `include/dquant.h` is generated from this file by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dquant::config::{ApproxLevel, QuantConfig};
use dquant::error::DqError;
use dquant::format;
use dquant::layerwise::{quantize_layer, QuantizedLayer};
use dquant::linalg::{build_hessian, Hessian};
use dquant::tensor::Tensor2D;

/// Outcome of a call. Anything but `Ok` leaves a message in
/// `dq_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DqStatus {
    /// The call succeeded.
    Ok = 0,
    /// A parameter or configuration value was rejected.
    InvalidArgument = 1,
    /// A file could not be read, written, or decoded.
    Io = 2,
    /// A solve failed numerically.
    Numerical = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// An internal invariant failed; the unwind was caught at the boundary.
    Panic = 5,
}

/// Dense row-major f64 matrix.
pub struct DqTensor {
    inner: Tensor2D,
}

/// Damped Gram matrix of calibration activations.
pub struct DqHessian {
    inner: Hessian,
}

/// A quantized layer: packed integer codes plus per-group scales and zeros.
/// Layers produced by `dq_quantize` also carry the solver's final objective.
pub struct DqQuantizedLayer {
    inner: QuantizedLayer,
    total_loss: f64,
    flagged_columns: usize,
}

/// Solver settings, mirroring the library configuration field for field.
/// Obtain defaults from `dq_quant_options_default` and adjust from there.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DqQuantOptions {
    /// Bit width of the integer grid (2, 3, or 4).
    pub bits: u8,
    /// Smallest representable integer level.
    pub alpha: i32,
    /// Largest representable integer level.
    pub beta: i32,
    /// Scale/zero groups along the input dimension; must divide it.
    pub group_count: u32,
    /// Integer-solve approximation: 1 = box-aware PGD, 2 = closed form.
    pub approx_level: u8,
    /// Alternation rounds between the integer and scale/zero solves.
    pub rounds: u32,
    /// Inner PGD iterations per sequential step (level 1 only).
    pub seq_pgd_iters: u32,
    /// Warm-up PGD iterations before the sequential pass (level 1 only).
    pub warmup_pgd_iters: u32,
    /// Shrink factors scanned by the grid-search initialization.
    pub grid_points: u32,
    /// Smallest shrink factor scanned.
    pub grid_shrink_min: f64,
    /// Largest shrink factor scanned.
    pub grid_shrink_max: f64,
    /// Nonzero to search a separate shrink factor per group.
    pub per_group_shrink: u8,
    /// Diagonal damping as a fraction of the mean Gram diagonal; recorded
    /// in reports, applied when the Hessian is built.
    pub damping_fraction: f64,
    /// PGD early-stop tolerance on the projected gradient norm.
    pub pgd_tolerance: f64,
    /// Seed for randomized subroutines; fixed seed means identical output.
    pub seed: u64,
    /// Worker threads for per-column parallelism; 0 uses one per core.
    pub workers: u32,
    /// Nonzero to pin (scale, zero) to (`fixed_scale`, `fixed_zero`) for
    /// every group and skip the analytic scale/zero updates.
    pub use_fixed_sz: u8,
    pub fixed_scale: f64,
    pub fixed_zero: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let sanitized = CString::new(msg)
        .unwrap_or_else(|_| CString::new("error message contained a NUL byte").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = sanitized);
}

fn fail(status: DqStatus, msg: String) -> DqStatus {
    set_error(msg);
    status
}

fn status_for(err: &DqError) -> DqStatus {
    match err {
        DqError::InvalidData(_) | DqError::InvalidConfig(_) => DqStatus::InvalidArgument,
        DqError::Io { .. } | DqError::Format(_) => DqStatus::Io,
        DqError::Singular { .. } | DqError::Numerical(_) => DqStatus::Numerical,
    }
}

fn from_result<T>(res: Result<T, DqError>) -> Result<T, DqStatus> {
    res.map_err(|e| fail(status_for(&e), e.to_string()))
}

/// Runs a fallible body behind a panic guard so unwinding never crosses the
/// ABI boundary.
fn guarded(body: impl FnOnce() -> Result<(), DqStatus>) -> DqStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => DqStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_owned())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_owned());
            fail(DqStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn require<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, DqStatus> {
    if ptr.is_null() {
        Err(fail(DqStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(&*ptr)
    }
}

unsafe fn require_out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, DqStatus> {
    if ptr.is_null() {
        Err(fail(DqStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(&mut *ptr)
    }
}

unsafe fn path_from(ptr: *const c_char, what: &str) -> Result<PathBuf, DqStatus> {
    if ptr.is_null() {
        return Err(fail(DqStatus::NullPointer, format!("{what} is null")));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(
            DqStatus::InvalidArgument,
            format!("{what} is not valid UTF-8"),
        )),
    }
}

fn config_from(opts: &DqQuantOptions) -> Result<(QuantConfig, usize), DqError> {
    let mut cfg = QuantConfig::for_bits(opts.bits)?;
    cfg.alpha = opts.alpha;
    cfg.beta = opts.beta;
    cfg.group_count = opts.group_count as usize;
    cfg.approx_level = match opts.approx_level {
        1 => ApproxLevel::Level1,
        2 => ApproxLevel::Level2,
        other => {
            return Err(DqError::InvalidConfig(format!(
                "approx_level must be 1 or 2, got {other}"
            )))
        }
    };
    cfg.rounds = opts.rounds as usize;
    cfg.seq_pgd_iters = opts.seq_pgd_iters as usize;
    cfg.warmup_pgd_iters = opts.warmup_pgd_iters as usize;
    cfg.grid_points = opts.grid_points as usize;
    cfg.grid_shrink_min = opts.grid_shrink_min;
    cfg.grid_shrink_max = opts.grid_shrink_max;
    cfg.per_group_shrink = opts.per_group_shrink != 0;
    cfg.damping_fraction = opts.damping_fraction;
    cfg.pgd_tolerance = opts.pgd_tolerance;
    cfg.seed = opts.seed;
    cfg.fixed_sz = (opts.use_fixed_sz != 0).then_some((opts.fixed_scale, opts.fixed_zero));
    cfg.validate()?;
    Ok((cfg, opts.workers as usize))
}

/// Returns the message of the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
/// Never null; the message is empty if nothing failed yet.
#[no_mangle]
pub extern "C" fn dq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// Tensors

/// Creates a row-major `rows` x `cols` tensor from `len` doubles.
///
/// # Safety
/// `data` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dq_tensor_create(
    rows: usize,
    cols: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut DqTensor,
) -> DqStatus {
    guarded(|| {
        let out = require_out(out, "out")?;
        if data.is_null() {
            return Err(fail(DqStatus::NullPointer, "data is null".into()));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let inner = from_result(Tensor2D::new(rows, cols, values))?;
        *out = Box::into_raw(Box::new(DqTensor { inner }));
        Ok(())
    })
}

/// Reads a tensor file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dq_tensor_read(path: *const c_char, out: *mut *mut DqTensor) -> DqStatus {
    guarded(|| {
        let out = require_out(out, "out")?;
        let path = path_from(path, "path")?;
        let inner = from_result(format::read_tensor(&path))?;
        *out = Box::into_raw(Box::new(DqTensor { inner }));
        Ok(())
    })
}

/// Writes a tensor file with an f64 payload.
///
/// # Safety
/// `path` must be a NUL-terminated string; `tensor` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dq_tensor_write(path: *const c_char, tensor: *const DqTensor) -> DqStatus {
    guarded(|| {
        let tensor = require(tensor, "tensor")?;
        let path = path_from(path, "path")?;
        from_result(format::write_tensor(&path, &tensor.inner))?;
        Ok(())
    })
}

/// Row count of a tensor; 0 if the handle is null.
///
/// # Safety
/// `tensor` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dq_tensor_rows(tensor: *const DqTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.inner.rows())
}

/// Column count of a tensor; 0 if the handle is null.
///
/// # Safety
/// `tensor` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dq_tensor_cols(tensor: *const DqTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.inner.cols())
}

/// Copies the row-major payload into `out`, which holds `len` doubles;
/// `len` must equal rows * cols.
///
/// # Safety
/// `tensor` must be a live handle; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dq_tensor_copy_data(
    tensor: *const DqTensor,
    out: *mut f64,
    len: usize,
) -> DqStatus {
    guarded(|| {
        let tensor = require(tensor, "tensor")?;
        if out.is_null() {
            return Err(fail(DqStatus::NullPointer, "out is null".into()));
        }
        let data = tensor.inner.data();
        if len != data.len() {
            return Err(fail(
                DqStatus::InvalidArgument,
                format!("buffer holds {len} values, tensor has {}", data.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), out, len);
        Ok(())
    })
}

/// Releases a tensor handle. Null is a no-op.
///
/// # Safety
/// `tensor` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn dq_tensor_free(tensor: *mut DqTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

// ---------------------------------------------------------------------------
// Hessians

/// Accumulates `activations` (batch x features) into a damped Gram matrix.
///
/// # Safety
/// `activations` must be a live tensor handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dq_hessian_build(
    activations: *const DqTensor,
    damping_fraction: f64,
    out: *mut *mut DqHessian,
) -> DqStatus {
    guarded(|| {
        let out = require_out(out, "out")?;
        let activations = require(activations, "activations")?;
        let inner = from_result(build_hessian(&activations.inner, damping_fraction))?;
        *out = Box::into_raw(Box::new(DqHessian { inner }));
        Ok(())
    })
}

/// Wraps an already-damped symmetric matrix, e.g. one read from a tensor
/// file written by the `dquant hessian` command.
///
/// # Safety
/// `matrix` must be a live tensor handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dq_hessian_from_matrix(
    matrix: *const DqTensor,
    out: *mut *mut DqHessian,
) -> DqStatus {
    guarded(|| {
        let out = require_out(out, "out")?;
        let matrix = require(matrix, "matrix")?;
        let inner = from_result(Hessian::from_matrix(matrix.inner.clone()))?;
        *out = Box::into_raw(Box::new(DqHessian { inner }));
        Ok(())
    })
}

/// Dimension of the Hessian; 0 if the handle is null.
///
/// # Safety
/// `hessian` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dq_hessian_dim(hessian: *const DqHessian) -> usize {
    hessian.as_ref().map_or(0, |h| h.inner.dim())
}

/// Releases a Hessian handle. Null is a no-op.
///
/// # Safety
/// `hessian` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn dq_hessian_free(hessian: *mut DqHessian) {
    if !hessian.is_null() {
        drop(Box::from_raw(hessian));
    }
}

// ---------------------------------------------------------------------------
// Quantized layers

/// Fills `out` with the default solver settings for a bit width.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dq_quant_options_default(bits: u8, out: *mut DqQuantOptions) -> DqStatus {
    guarded(|| {
        let out = require_out(out, "out")?;
        let cfg = from_result(QuantConfig::for_bits(bits))?;
        *out = DqQuantOptions {
            bits: cfg.bits,
            alpha: cfg.alpha,
            beta: cfg.beta,
            group_count: cfg.group_count as u32,
            approx_level: match cfg.approx_level {
                ApproxLevel::Level1 => 1,
                ApproxLevel::Level2 => 2,
            },
            rounds: cfg.rounds as u32,
            seq_pgd_iters: cfg.seq_pgd_iters as u32,
            warmup_pgd_iters: cfg.warmup_pgd_iters as u32,
            grid_points: cfg.grid_points as u32,
            grid_shrink_min: cfg.grid_shrink_min,
            grid_shrink_max: cfg.grid_shrink_max,
            per_group_shrink: u8::from(cfg.per_group_shrink),
            damping_fraction: cfg.damping_fraction,
            pgd_tolerance: cfg.pgd_tolerance,
            seed: cfg.seed,
            workers: 0,
            use_fixed_sz: 0,
            fixed_scale: 0.0,
            fixed_zero: 0.0,
        };
        Ok(())
    })
}

/// Quantizes a d_in x d_out weight tensor against a d_in x d_in Hessian.
///
/// # Safety
/// All handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dq_quantize(
    weights: *const DqTensor,
    hessian: *const DqHessian,
    options: *const DqQuantOptions,
    out: *mut *mut DqQuantizedLayer,
) -> DqStatus {
    guarded(|| {
        let out = require_out(out, "out")?;
        let weights = require(weights, "weights")?;
        let hessian = require(hessian, "hessian")?;
        let options = require(options, "options")?;
        let (cfg, workers) = from_result(config_from(options))?;
        let (layer, report) = from_result(quantize_layer(
            &weights.inner,
            &hessian.inner,
            &cfg,
            workers,
        ))?;
        *out = Box::into_raw(Box::new(DqQuantizedLayer {
            inner: layer,
            total_loss: report.totals.total_g,
            flagged_columns: report.totals.flagged_columns,
        }));
        Ok(())
    })
}

/// Reads a quantized-layer file. Layers from files report NaN as their
/// total loss because no solve produced them.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_read(
    path: *const c_char,
    out: *mut *mut DqQuantizedLayer,
) -> DqStatus {
    guarded(|| {
        let out = require_out(out, "out")?;
        let path = path_from(path, "path")?;
        let inner = from_result(format::read_quant(&path))?;
        *out = Box::into_raw(Box::new(DqQuantizedLayer {
            inner,
            total_loss: f64::NAN,
            flagged_columns: 0,
        }));
        Ok(())
    })
}

/// Writes a quantized layer in the packed format.
///
/// # Safety
/// `path` must be a NUL-terminated string; `layer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_write(
    path: *const c_char,
    layer: *const DqQuantizedLayer,
) -> DqStatus {
    guarded(|| {
        let layer = require(layer, "layer")?;
        let path = path_from(path, "path")?;
        from_result(format::write_quant(&path, &layer.inner))?;
        Ok(())
    })
}

/// Input dimension (rows of the original weights); 0 if null.
///
/// # Safety
/// `layer` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_d_in(layer: *const DqQuantizedLayer) -> usize {
    layer.as_ref().map_or(0, |l| l.inner.d_in)
}

/// Output dimension (columns of the original weights); 0 if null.
///
/// # Safety
/// `layer` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_d_out(layer: *const DqQuantizedLayer) -> usize {
    layer.as_ref().map_or(0, |l| l.inner.d_out)
}

/// Bit width of the stored codes; 0 if null.
///
/// # Safety
/// `layer` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_bits(layer: *const DqQuantizedLayer) -> u8 {
    layer.as_ref().map_or(0, |l| l.inner.bits)
}

/// Scale/zero groups per column; 0 if null.
///
/// # Safety
/// `layer` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_group_count(layer: *const DqQuantizedLayer) -> usize {
    layer.as_ref().map_or(0, |l| l.inner.group_count)
}

/// Final solver objective summed over columns; NaN for layers read from
/// files or a null handle.
///
/// # Safety
/// `layer` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_total_loss(layer: *const DqQuantizedLayer) -> f64 {
    layer.as_ref().map_or(f64::NAN, |l| l.total_loss)
}

/// Columns that fell back to an earlier iterate after a singular analytic
/// solve; 0 if null or read from a file.
///
/// # Safety
/// `layer` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_flagged_columns(layer: *const DqQuantizedLayer) -> usize {
    layer.as_ref().map_or(0, |l| l.flagged_columns)
}

/// Copies column `column`'s unpacked integer codes into `out` (`len` must
/// equal the input dimension).
///
/// # Safety
/// `layer` must be a live handle; `out` must point to `len` writable i32.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_copy_codes(
    layer: *const DqQuantizedLayer,
    column: usize,
    out: *mut i32,
    len: usize,
) -> DqStatus {
    guarded(|| {
        let layer = require(layer, "layer")?;
        if out.is_null() {
            return Err(fail(DqStatus::NullPointer, "out is null".into()));
        }
        if column >= layer.inner.d_out {
            return Err(fail(
                DqStatus::InvalidArgument,
                format!(
                    "column {column} out of range for d_out {}",
                    layer.inner.d_out
                ),
            ));
        }
        if len != layer.inner.d_in {
            return Err(fail(
                DqStatus::InvalidArgument,
                format!("buffer holds {len} values, column has {}", layer.inner.d_in),
            ));
        }
        let codes = from_result(layer.inner.column_qweights(column))?;
        std::ptr::copy_nonoverlapping(codes.as_ptr(), out, len);
        Ok(())
    })
}

/// Copies column `column`'s scales and zero points into two buffers of
/// `len` floats each; `len` must equal the group count.
///
/// # Safety
/// `layer` must be a live handle; both buffers must hold `len` writable f32.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_copy_scales_zeros(
    layer: *const DqQuantizedLayer,
    column: usize,
    scales_out: *mut f32,
    zeros_out: *mut f32,
    len: usize,
) -> DqStatus {
    guarded(|| {
        let layer = require(layer, "layer")?;
        if scales_out.is_null() || zeros_out.is_null() {
            return Err(fail(DqStatus::NullPointer, "output buffer is null".into()));
        }
        if column >= layer.inner.d_out {
            return Err(fail(
                DqStatus::InvalidArgument,
                format!(
                    "column {column} out of range for d_out {}",
                    layer.inner.d_out
                ),
            ));
        }
        if len != layer.inner.group_count {
            return Err(fail(
                DqStatus::InvalidArgument,
                format!(
                    "buffer holds {len} values, column has {} groups",
                    layer.inner.group_count
                ),
            ));
        }
        std::ptr::copy_nonoverlapping(layer.inner.column_scales(column).as_ptr(), scales_out, len);
        std::ptr::copy_nonoverlapping(layer.inner.column_zeros(column).as_ptr(), zeros_out, len);
        Ok(())
    })
}

/// Reconstructs the full d_in x d_out floating-point weight matrix.
///
/// # Safety
/// `layer` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_dequantize(
    layer: *const DqQuantizedLayer,
    out: *mut *mut DqTensor,
) -> DqStatus {
    guarded(|| {
        let out = require_out(out, "out")?;
        let layer = require(layer, "layer")?;
        let inner = from_result(layer.inner.dequantize_matrix())?;
        *out = Box::into_raw(Box::new(DqTensor { inner }));
        Ok(())
    })
}

/// Releases a layer handle. Null is a no-op.
///
/// # Safety
/// `layer` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn dq_layer_free(layer: *mut DqQuantizedLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}
