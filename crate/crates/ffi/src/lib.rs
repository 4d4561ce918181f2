//! C ABI over the restoration model: opaque handles, integer status codes,
//! and a per-thread error message. The matching header is generated into
//! `include/clusterscan.h` at build time.
//!
//! Conventions:
//! - Every fallible call returns [`CsmStatus`]; `CsmStatus_Ok` is zero.
//! - On failure, [`csm_last_error`] returns a NUL-terminated description,
//!   valid on the calling thread until its next failing call.
//! - Image buffers are planar `[3, height, width]` doubles in `[0, 1]`,
//!   matching the library's on-disk decode layout.
//! - Handles from `csm_model_new` / `csm_model_load` must be released with
//!   `csm_model_free`. No call transfers ownership of caller memory.

use clusterscan::error::Error;
use clusterscan::metrics;
use clusterscan::network::{Model, NetworkConfig};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CsmStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullPointer = 1,
    /// Arguments or configuration were rejected (shapes, extents, presets).
    InvalidArgument = 2,
    /// File I/O failed or serialized data was malformed.
    IoError = 3,
    /// An internal computation failed.
    RuntimeError = 4,
}

/// Built-in model configurations.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CsmPreset {
    /// The full restoration network (about 2.77M parameters).
    Standard = 0,
    /// The small test network; fast enough for smoke checks.
    Small = 1,
}

/// Opaque model handle. Layout is private to the library.
pub struct CsmModel {
    inner: Model<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: CsmStatus, message: impl Into<String>) -> CsmStatus {
    let owned = CString::new(message.into().replace('\0', " "))
        .unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
    status
}

fn fail_with(err: Error) -> CsmStatus {
    let status = match err {
        Error::Shape(_) | Error::Contract(_) | Error::Config(_) => CsmStatus::InvalidArgument,
        Error::Format(_) | Error::Data(_) | Error::Io(_) => CsmStatus::IoError,
        Error::Verification(_) | Error::Diverged { .. } => CsmStatus::RuntimeError,
    };
    fail(status, err.to_string())
}

fn fail_null(what: &str) -> CsmStatus {
    fail(CsmStatus::NullPointer, format!("{what} must not be NULL"))
}

/// Run a body with panics converted into `RuntimeError` instead of crossing
/// the language boundary.
fn guarded(body: impl FnOnce() -> CsmStatus) -> CsmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(CsmStatus::RuntimeError, "internal panic"),
    }
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, CsmStatus> {
    if ptr.is_null() {
        return Err(fail_null("path"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(CsmStatus::InvalidArgument, "path is not valid UTF-8")),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the calling thread's most recent failure; empty until one
/// occurs. The pointer stays valid until the next failing call on the thread.
#[no_mangle]
pub extern "C" fn csm_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Create a freshly initialized model (an exact identity map until trained).
#[no_mangle]
pub unsafe extern "C" fn csm_model_new(
    preset: CsmPreset,
    seed: u64,
    out: *mut *mut CsmModel,
) -> CsmStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let config = match preset {
            CsmPreset::Standard => NetworkConfig::standard(),
            CsmPreset::Small => NetworkConfig::smoke(),
        };
        match Model::build(config, seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CsmModel { inner }));
                CsmStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Load a model from a checkpoint file written by `csm_model_save` (or the
/// command-line trainer).
#[no_mangle]
pub unsafe extern "C" fn csm_model_load(path: *const c_char, out: *mut *mut CsmModel) -> CsmStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match Model::load(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CsmModel { inner }));
                CsmStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Write the model to a checkpoint file. Values are stored in 32-bit
/// precision; save -> load -> save is byte-identical.
#[no_mangle]
pub unsafe extern "C" fn csm_model_save(model: *const CsmModel, path: *const c_char) -> CsmStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match model.inner.save(path) {
            Ok(()) => CsmStatus::Ok,
            Err(e) => fail_with(e),
        }
    })
}

/// Release a model handle. NULL is accepted and ignored.
#[no_mangle]
pub unsafe extern "C" fn csm_model_free(model: *mut CsmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learnable parameter values in the model.
#[no_mangle]
pub unsafe extern "C" fn csm_model_param_count(
    model: *const CsmModel,
    out: *mut u64,
) -> CsmStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        if out.is_null() {
            return fail_null("out");
        }
        *out = model.inner.param_count() as u64;
        CsmStatus::Ok
    })
}

/// Both image extents passed to `csm_model_restore` must be multiples of
/// this divisor (callers pad beforehand and crop afterwards).
#[no_mangle]
pub unsafe extern "C" fn csm_model_spatial_divisor(
    model: *const CsmModel,
    out: *mut u64,
) -> CsmStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        if out.is_null() {
            return fail_null("out");
        }
        *out = model.inner.config.spatial_divisor() as u64;
        CsmStatus::Ok
    })
}

/// Restore one image. `rgb` and `out` are planar `[3, height, width]`
/// buffers of `3 * height * width` doubles in `[0, 1]`; they may not alias.
/// Deterministic: the same model and input always produce the same output.
#[no_mangle]
pub unsafe extern "C" fn csm_model_restore(
    model: *const CsmModel,
    rgb: *const f64,
    height: u64,
    width: u64,
    out: *mut f64,
) -> CsmStatus {
    guarded(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        if rgb.is_null() {
            return fail_null("rgb");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let (h, w) = (height as usize, width as usize);
        if h == 0 || w == 0 {
            return fail(CsmStatus::InvalidArgument, "image extents must be positive");
        }
        let len = 3 * h * w;
        let input = std::slice::from_raw_parts(rgb, len);
        match model.inner.restore(&[1, 3, h, w], input) {
            Ok(values) => {
                std::slice::from_raw_parts_mut(out, len).copy_from_slice(&values);
                CsmStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Peak signal-to-noise ratio in dB between two equal-length buffers of
/// values in `[0, 1]`. Identical buffers yield +infinity.
#[no_mangle]
pub unsafe extern "C" fn csm_psnr(
    a: *const f64,
    b: *const f64,
    len: u64,
    out: *mut f64,
) -> CsmStatus {
    guarded(|| {
        if a.is_null() || b.is_null() {
            return fail_null("a/b");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let (av, bv) = (
            std::slice::from_raw_parts(a, len as usize),
            std::slice::from_raw_parts(b, len as usize),
        );
        match metrics::psnr(av, bv) {
            Ok(v) => {
                *out = v;
                CsmStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Mean structural similarity between two planar `[channels, height, width]`
/// buffers, computed per channel over an 11x11 Gaussian window.
#[no_mangle]
pub unsafe extern "C" fn csm_ssim(
    a: *const f64,
    b: *const f64,
    channels: u64,
    height: u64,
    width: u64,
    out: *mut f64,
) -> CsmStatus {
    guarded(|| {
        if a.is_null() || b.is_null() {
            return fail_null("a/b");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let (c, h, w) = (channels as usize, height as usize, width as usize);
        let len = c * h * w;
        let (av, bv) =
            (std::slice::from_raw_parts(a, len), std::slice::from_raw_parts(b, len));
        match metrics::ssim(av, bv, c, h, w) {
            Ok(v) => {
                *out = v;
                CsmStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

// ── tests ───────────────────────────────────────────────────────────────────
