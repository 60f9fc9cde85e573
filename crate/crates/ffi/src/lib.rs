//! C ABI over checkpoint loading, spectrogram preprocessing and inference.
//!
//! Every function returns a [`ShmStatus`]; on failure the message is kept
//! per thread and can be read with [`shm_last_error_message`]. Models are
//! opaque [`ShmModel`] handles released with [`shm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::ArrayView2;
use shm_fomo::anomaly::median_smooth;
use shm_fomo::model::{load_checkpoint, MaeModel};
use shm_fomo::signal::{compute_target, spectrogram, VehicleClass, SPEC_SIZE};
use shm_fomo::Error;

/// Side length of the square spectrogram images.
pub const SHM_SPEC_SIZE: usize = 100;

const _: () = assert!(SHM_SPEC_SIZE == SPEC_SIZE);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Integrity = 5,
    Shape = 6,
    Mode = 7,
    Data = 8,
    Panic = 9,
    Other = 10,
}

/// Opaque model handle.
pub struct ShmModel {
    inner: MaeModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> ShmStatus {
    match e {
        Error::Io(_) => ShmStatus::Io,
        Error::Format(_) => ShmStatus::Format,
        Error::Integrity(_) => ShmStatus::Integrity,
        Error::Shape(_) => ShmStatus::Shape,
        Error::Mode(_) => ShmStatus::Mode,
        Error::Data(_) | Error::EmptyInput(_) => ShmStatus::Data,
        Error::Config(_) => ShmStatus::InvalidArgument,
        _ => ShmStatus::Other,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (ShmStatus, String)>) -> ShmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ShmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ShmStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (ShmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ShmStatus, String) {
    (ShmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(
    ptr: *const T,
    len: usize,
    what: &str,
) -> Result<&'a [T], (ShmStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn model<'a>(m: *const ShmModel) -> Result<&'a ShmModel, (ShmStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn image<'a>(
    ptr: *const f32,
    len: usize,
) -> Result<ArrayView2<'a, f32>, (ShmStatus, String)> {
    if len != SPEC_SIZE * SPEC_SIZE {
        return Err((
            ShmStatus::Shape,
            format!("image has {len} values, expected {}", SPEC_SIZE * SPEC_SIZE),
        ));
    }
    let data = slice(ptr, len, "image")?;
    Ok(ArrayView2::from_shape((SPEC_SIZE, SPEC_SIZE), data).expect("length checked"))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length in
/// bytes, without the terminator.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn shm_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn shm_model_load(path: *const c_char, out: *mut *mut ShmModel) -> ShmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (ShmStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let inner = load_checkpoint(Path::new(p)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(ShmModel { inner }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`shm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn shm_model_free(model: *mut ShmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters of the loaded model.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn shm_model_param_count(
    model: *const ShmModel,
    out: *mut usize,
) -> ShmStatus {
    guard(|| {
        let m = self::model(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.param_count();
        Ok(())
    })
}

/// 1 if the model has a reconstruction decoder, 0 if it is a regressor.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn shm_model_has_decoder(model: *const ShmModel, out: *mut i32) -> ShmStatus {
    guard(|| {
        let m = self::model(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.has_decoder() as i32;
        Ok(())
    })
}

/// Standardized log-magnitude spectrogram of one normalized window, written
/// row-major into `out` (`SHM_SPEC_SIZE * SHM_SPEC_SIZE` floats).
///
/// # Safety
/// `samples` must hold `len` values and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn shm_spectrogram(
    samples: *const f64,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> ShmStatus {
    guard(|| {
        let x = slice(samples, len, "samples")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != SPEC_SIZE * SPEC_SIZE {
            return Err((ShmStatus::Shape, format!("output holds {out_len} values")));
        }
        let img = spectrogram(x).map_err(lib_err)?;
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (d, s) in dst.iter_mut().zip(img.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Masked reconstruction error of one image with the mask drawn from
/// `eval_seed`.
///
/// # Safety
/// `image` must hold `len` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn shm_model_reconstruction_error(
    model: *const ShmModel,
    image: *const f32,
    len: usize,
    eval_seed: u64,
    out: *mut f64,
) -> ShmStatus {
    guard(|| {
        let m = self::model(model)?;
        let im = self::image(image, len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m
            .inner
            .reconstruction_error(im, eval_seed)
            .map_err(lib_err)?;
        Ok(())
    })
}

/// Traffic-load prediction of a regression checkpoint.
///
/// # Safety
/// `image` must hold `len` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn shm_model_regress(
    model: *const ShmModel,
    image: *const f32,
    len: usize,
    out: *mut f32,
) -> ShmStatus {
    guard(|| {
        let m = self::model(model)?;
        let im = self::image(image, len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.forward_regress(im).map_err(lib_err)?;
        Ok(())
    })
}

/// Traffic target of a label window. `class` is 0 for any vehicle, 1 for
/// light, 2 for heavy.
///
/// # Safety
/// `labels` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn shm_compute_target(
    labels: *const u8,
    len: usize,
    class: u32,
    out: *mut f64,
) -> ShmStatus {
    guard(|| {
        let l = slice(labels, len, "labels")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let class = match class {
            0 => VehicleClass::Any,
            1 => VehicleClass::Light,
            2 => VehicleClass::Heavy,
            c => {
                return Err((
                    ShmStatus::InvalidArgument,
                    format!("unknown vehicle class {c}"),
                ))
            }
        };
        *out = compute_target(l, class).map_err(lib_err)?;
        Ok(())
    })
}

/// Causal median smoothing of an error series into `out` (`len` values).
///
/// # Safety
/// `errors` and `out` must each hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn shm_median_smooth(
    errors: *const f64,
    len: usize,
    filter_len: usize,
    out: *mut f64,
) -> ShmStatus {
    guard(|| {
        let e = slice(errors, len, "errors")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = median_smooth(e, filter_len).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&s);
        Ok(())
    })
}
