//! C ABI for the regconv kernel library.
//!
//! Opaque handles, integer status codes, and a thread-local last-error
//! message. All tensors cross the boundary as dense row-major `double`
//! payloads with explicit dimensions; handles own their memory and must be
//! released with the matching `_free` function. Every entry point catches
//! panics and converts them to `REGCONV_STATUS_PANIC`.

use libc::{c_char, c_double, c_int, size_t};
use regconv::group::{CyclicGroup, RegularField, RRoI};
use regconv::layers::backbone::{BackboneConfig, ModelKind};
use regconv::roi::{orientation_align, rroi_align_spatial, AlignSpec};
use regconv::tensor::{rotate_planar, PlanarTensor};
use regconv::verify::{equivariance_error, ToyModel};
use std::cell::RefCell;
use std::ffi::CString;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegconvStatus {
    RegconvStatusOk = 0,
    RegconvStatusInvalidArgument = 1,
    RegconvStatusNullPointer = 2,
    RegconvStatusPanic = 3,
}

use RegconvStatus::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(msg: &str) -> RegconvStatus {
    set_last_error(msg);
    RegconvStatusInvalidArgument
}

fn guard(f: impl FnOnce() -> RegconvStatus + std::panic::UnwindSafe) -> RegconvStatus {
    match catch_unwind(f) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("panic inside regconv");
            RegconvStatusPanic
        }
    }
}

/// Dense row-major f64 tensor handle.
pub struct RegconvTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Backbone model handle (equivariant or plain control).
pub struct RegconvBackbone {
    model: ToyModel<f64>,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn regconv_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message for the most recent error on this thread. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn regconv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Create a tensor from `rank` dimensions and a dense row-major payload.
/// Returns NULL on invalid input.
///
/// # Safety
/// `dims` must point to `rank` readable `size_t`s and `data` to the product
/// of the dimensions readable doubles.
#[no_mangle]
pub unsafe extern "C" fn regconv_tensor_create(
    dims: *const size_t,
    rank: size_t,
    data: *const c_double,
) -> *mut RegconvTensor {
    if dims.is_null() || data.is_null() || rank == 0 || rank > 8 {
        set_last_error("tensor_create: null pointer or bad rank");
        return ptr::null_mut();
    }
    let dims: Vec<usize> = std::slice::from_raw_parts(dims, rank).to_vec();
    if dims.iter().any(|&d| d == 0) {
        set_last_error("tensor_create: zero-sized dimension");
        return ptr::null_mut();
    }
    let count: usize = dims.iter().product();
    let data = std::slice::from_raw_parts(data, count).to_vec();
    Box::into_raw(Box::new(RegconvTensor { dims, data }))
}

/// Number of dimensions of a tensor handle.
#[no_mangle]
pub extern "C" fn regconv_tensor_rank(t: *const RegconvTensor) -> size_t {
    if t.is_null() {
        return 0;
    }
    unsafe { (*t).dims.len() }
}

/// Copy the dimensions into `out` (length `rank`).
///
/// # Safety
/// `out` must have room for `regconv_tensor_rank(t)` values.
#[no_mangle]
pub unsafe extern "C" fn regconv_tensor_dims(
    t: *const RegconvTensor,
    out: *mut size_t,
) -> RegconvStatus {
    if t.is_null() || out.is_null() {
        set_last_error("tensor_dims: null pointer");
        return RegconvStatusNullPointer;
    }
    let dims = &(*t).dims;
    std::ptr::copy_nonoverlapping(dims.as_ptr(), out, dims.len());
    RegconvStatusOk
}

/// Total element count.
#[no_mangle]
pub extern "C" fn regconv_tensor_len(t: *const RegconvTensor) -> size_t {
    if t.is_null() {
        return 0;
    }
    unsafe { (*t).data.len() }
}

/// Copy the payload into `out` (length `len`, which must match
/// `regconv_tensor_len`).
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn regconv_tensor_copy_data(
    t: *const RegconvTensor,
    out: *mut c_double,
    len: size_t,
) -> RegconvStatus {
    if t.is_null() || out.is_null() {
        set_last_error("tensor_copy_data: null pointer");
        return RegconvStatusNullPointer;
    }
    if (*t).data.len() != len {
        return fail("tensor_copy_data: length mismatch");
    }
    std::ptr::copy_nonoverlapping((*t).data.as_ptr(), out, len);
    RegconvStatusOk
}

/// Release a tensor handle. NULL is a no-op.
///
/// # Safety
/// `t` must be a pointer returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn regconv_tensor_free(t: *mut RegconvTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

fn planar_from_handle(t: &RegconvTensor) -> Result<PlanarTensor<f64>, String> {
    if t.dims.len() != 3 {
        return Err(format!("expected a (C, H, W) tensor, got rank {}", t.dims.len()));
    }
    PlanarTensor::from_vec(t.dims[0], t.dims[1], t.dims[2], t.data.clone())
        .map_err(|e| e.to_string())
}

/// Build a backbone. `kind` is 0 for the rotation-equivariant model, 1 for
/// the plain control; `widths` lists the per-stage base channels.
///
/// # Safety
/// `widths` must point to `n_stages` readable `size_t`s (it may be NULL when
/// `n_stages` is 0, which builds a stem-only model).
#[no_mangle]
pub unsafe extern "C" fn regconv_backbone_create(
    group_order: size_t,
    widths: *const size_t,
    n_stages: size_t,
    fpn_width: size_t,
    kind: c_int,
    seed: u64,
) -> *mut RegconvBackbone {
    let stage_widths: Vec<usize> = if n_stages == 0 {
        Vec::new()
    } else {
        if widths.is_null() {
            set_last_error("backbone_create: null widths");
            return ptr::null_mut();
        }
        std::slice::from_raw_parts(widths, n_stages).to_vec()
    };
    let model_kind = match kind {
        0 => ModelKind::Equivariant,
        1 => ModelKind::Plain,
        _ => {
            set_last_error("backbone_create: kind must be 0 (equivariant) or 1 (plain)");
            return ptr::null_mut();
        }
    };
    let result = catch_unwind(|| {
        let cfg = BackboneConfig {
            group_order,
            in_channels: 1,
            blocks_per_stage: vec![1; stage_widths.len()],
            stage_widths,
            fpn_width,
            kernel_size: 3,
        };
        ToyModel::new(model_kind, cfg, seed)
    });
    match result {
        Ok(Ok(model)) => Box::into_raw(Box::new(RegconvBackbone { model })),
        Ok(Err(e)) => {
            set_last_error(&e.to_string());
            ptr::null_mut()
        }
        Err(_) => {
            set_last_error("panic inside regconv");
            ptr::null_mut()
        }
    }
}

/// Release a backbone handle. NULL is a no-op.
///
/// # Safety
/// `b` must be a pointer returned by `regconv_backbone_create` and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn regconv_backbone_free(b: *mut RegconvBackbone) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}

/// Run the backbone on a `(C, H, W)` image and return pyramid level
/// `level` as a new tensor: `(K, N, H, W)` for the equivariant model,
/// `(C, H, W)` for the plain control.
///
/// # Safety
/// All handles must be valid; `out` must be a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn regconv_backbone_forward(
    b: *const RegconvBackbone,
    image: *const RegconvTensor,
    level: size_t,
    out: *mut *mut RegconvTensor,
) -> RegconvStatus {
    if b.is_null() || image.is_null() || out.is_null() {
        set_last_error("backbone_forward: null pointer");
        return RegconvStatusNullPointer;
    }
    let backbone = &*b;
    let image = &*image;
    guard(AssertUnwindSafe(|| {
        let img = match planar_from_handle(image) {
            Ok(t) => t,
            Err(e) => return fail(&format!("backbone_forward: {e}")),
        };
        match backbone.model.forward_levels(&img) {
            Ok(levels) => {
                if level >= levels.len() {
                    return fail(&format!(
                        "backbone_forward: level {level} out of range ({} levels)",
                        levels.len()
                    ));
                }
                let (dims, data) = levels[level].clone();
                *out = Box::into_raw(Box::new(RegconvTensor { dims, data }));
                RegconvStatusOk
            }
            Err(e) => fail(&e.to_string()),
        }
    }))
}

/// Rotation-invariant RoI Align over a `(K, N, H, W)` field tensor: spatial
/// alignment of the rotated box followed by orientation alignment with
/// `interp_channels ∈ {1, 2, 4}`. Returns a `(K, N, out_size, out_size)`
/// tensor.
///
/// # Safety
/// `field` must be a valid tensor handle and `out` a writable pointer slot.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn regconv_riroi_align(
    field: *const RegconvTensor,
    x: c_double,
    y: c_double,
    w: c_double,
    h: c_double,
    theta: c_double,
    out_size: size_t,
    samples_per_axis: size_t,
    interp_channels: size_t,
    out: *mut *mut RegconvTensor,
) -> RegconvStatus {
    if field.is_null() || out.is_null() {
        set_last_error("riroi_align: null pointer");
        return RegconvStatusNullPointer;
    }
    let field = &*field;
    guard(AssertUnwindSafe(|| {
        if field.dims.len() != 4 {
            return fail("riroi_align: field must be (K, N, H, W)");
        }
        let [k, n, fh, fw] = [field.dims[0], field.dims[1], field.dims[2], field.dims[3]];
        let group = match CyclicGroup::new(n) {
            Ok(g) => g,
            Err(e) => return fail(&e.to_string()),
        };
        let spec = AlignSpec {
            output_size: out_size,
            samples_per_axis,
            interp_channels,
        };
        let run = || -> regconv::Result<RegconvTensor> {
            let field = RegularField::from_vec(group, k, fh, fw, field.data.clone())?;
            let b = RRoI::new(x, y, w, h, theta)?;
            let spatial = rroi_align_spatial(&field, &b, &spec)?;
            let aligned = orientation_align(&spatial, b.theta, &spec)?;
            Ok(RegconvTensor {
                dims: vec![k, n, spec.output_size, spec.output_size],
                data: aligned.into_data(),
            })
        };
        match run() {
            Ok(t) => {
                *out = Box::into_raw(Box::new(t));
                RegconvStatusOk
            }
            Err(e) => fail(&e.to_string()),
        }
    }))
}

/// Rotate a `(C, H, W)` tensor counter-clockwise about its center.
///
/// # Safety
/// `t` must be a valid tensor handle and `out` a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn regconv_rotate_planar(
    t: *const RegconvTensor,
    angle: c_double,
    out: *mut *mut RegconvTensor,
) -> RegconvStatus {
    if t.is_null() || out.is_null() {
        set_last_error("rotate_planar: null pointer");
        return RegconvStatusNullPointer;
    }
    let t = &*t;
    guard(AssertUnwindSafe(|| {
        let img = match planar_from_handle(t) {
            Ok(v) => v,
            Err(e) => return fail(&format!("rotate_planar: {e}")),
        };
        if !angle.is_finite() {
            return fail("rotate_planar: angle must be finite");
        }
        let rotated = rotate_planar(&img, angle, None);
        *out = Box::into_raw(Box::new(RegconvTensor {
            dims: t.dims.clone(),
            data: rotated.into_data(),
        }));
        RegconvStatusOk
    }))
}

/// Interior relative L2 equivariance error of the backbone for group
/// element `k` on the given image.
///
/// # Safety
/// Handles must be valid; `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn regconv_equivariance_error(
    b: *const RegconvBackbone,
    image: *const RegconvTensor,
    k: size_t,
    out: *mut c_double,
) -> RegconvStatus {
    if b.is_null() || image.is_null() || out.is_null() {
        set_last_error("equivariance_error: null pointer");
        return RegconvStatusNullPointer;
    }
    let backbone = &*b;
    let image = &*image;
    guard(AssertUnwindSafe(|| {
        let img = match planar_from_handle(image) {
            Ok(t) => t,
            Err(e) => return fail(&format!("equivariance_error: {e}")),
        };
        match equivariance_error(&backbone.model, &img, k) {
            Ok(err) => {
                *out = err;
                RegconvStatusOk
            }
            Err(e) => fail(&e.to_string()),
        }
    }))
}
