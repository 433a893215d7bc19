//! C ABI over the inversion library.
//!
//! Every entry point returns a [`FracinvStatus`]; on failure a message is
//! available from [`fracinv_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fracinv::caputo::caputo_weights;
use fracinv::config::ExperimentConfig;
use fracinv::forward::{arctan_transform, ForwardMap, FullModel, GammaParam};
use fracinv::gpc::Surrogate;
use fracinv::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FracinvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Malformed = 5,
    Numerical = 6,
    Config = 7,
    Panic = 8,
}

/// Loaded gPC surrogate.
pub struct FracinvSurrogate {
    inner: Surrogate,
}

/// Fine-grid forward model built from an experiment configuration.
pub struct FracinvForward {
    inner: FullModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> FracinvStatus {
    match e {
        Error::DimensionMismatch { .. } => FracinvStatus::DimensionMismatch,
        Error::Io(_) => FracinvStatus::Io,
        Error::Malformed { .. } | Error::Json(_) | Error::Csv(_) => FracinvStatus::Malformed,
        Error::Config(_) => FracinvStatus::Config,
        Error::InvalidInput(_) | Error::InvalidGamma(_) | Error::SensorOutsideDomain { .. } | Error::TimeOutOfRange { .. } => {
            FracinvStatus::InvalidArgument
        }
        Error::Stage { source, .. } => status_of(source),
        _ => FracinvStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FracinvStatus, String)>) -> FracinvStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FracinvStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            FracinvStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FracinvStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FracinvStatus, String) {
    (FracinvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (FracinvStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (FracinvStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (FracinvStatus, String)> {
    if p.is_null() {
        return if len == 0 { Ok(&[]) } else { Err(null(what)) };
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (FracinvStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<(), (FracinvStatus, String)> {
    if expected == actual {
        Ok(())
    } else {
        Err((FracinvStatus::DimensionMismatch, format!("{what}: expected {expected}, got {actual}")))
    }
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fracinv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fracinv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `h(x) = 1/2 + atan(x)/π`.
#[no_mangle]
pub extern "C" fn fracinv_arctan_transform(x: f64) -> f64 {
    arctan_transform(x)
}

/// History weights for step `n`: `b` and `c`, each of length `n`.
///
/// # Safety
/// `b_out` and `c_out` must each point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fracinv_caputo_weights(
    gamma: f64,
    n: usize,
    b_out: *mut f64,
    c_out: *mut f64,
    len: usize,
) -> FracinvStatus {
    guard(|| {
        check_len("weight buffer", n, len)?;
        let b = unsafe { slice_out(b_out, len, "b_out")? };
        let c = unsafe { slice_out(c_out, len, "c_out")? };
        let w = caputo_weights(gamma, n).map_err(lib_err)?;
        b.copy_from_slice(&w.b);
        c.copy_from_slice(&w.c);
        Ok(())
    })
}

/// Load a surrogate from a directory written by the pipeline.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fracinv_surrogate_load(dir: *const c_char, out: *mut *mut FracinvSurrogate) -> FracinvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = unsafe { path_arg(dir, "dir")? };
        let s = Surrogate::load(&dir).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(FracinvSurrogate { inner: s })) };
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`fracinv_surrogate_load`]; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn fracinv_surrogate_dims(
    h: *const FracinvSurrogate,
    n_params: *mut usize,
    n_obs: *mut usize,
) -> FracinvStatus {
    guard(|| {
        let h = unsafe { h.as_ref() }.ok_or_else(|| null("handle"))?;
        if let Some(p) = unsafe { n_params.as_mut() } {
            *p = h.inner.n_params();
        }
        if let Some(p) = unsafe { n_obs.as_mut() } {
            *p = h.inner.n_obs();
        }
        Ok(())
    })
}

/// Evaluate the surrogate at `z` into `out`.
///
/// # Safety
/// `z` must hold `nz` doubles and `out` have room for `nout`.
#[no_mangle]
pub unsafe extern "C" fn fracinv_surrogate_eval(
    h: *const FracinvSurrogate,
    z: *const f64,
    nz: usize,
    out: *mut f64,
    nout: usize,
) -> FracinvStatus {
    guard(|| {
        let h = unsafe { h.as_ref() }.ok_or_else(|| null("handle"))?;
        check_len("parameter vector", h.inner.n_params(), nz)?;
        check_len("output buffer", h.inner.n_obs(), nout)?;
        let z = unsafe { slice_arg(z, nz, "z")? };
        let out = unsafe { slice_out(out, nout, "out")? };
        out.copy_from_slice(h.inner.eval(z).as_slice());
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`fracinv_surrogate_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fracinv_surrogate_free(h: *mut FracinvSurrogate) {
    if !h.is_null() {
        drop(unsafe { Box::from_raw(h) });
    }
}

/// Fine-grid model at the solver step with the configured order, taking KL
/// coefficients. A null path uses the built-in defaults.
///
/// # Safety
/// `config_path` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fracinv_forward_new(config_path: *const c_char, out: *mut *mut FracinvForward) -> FracinvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_path.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::load(&unsafe { path_arg(config_path, "config_path")? }).map_err(lib_err)?
        };
        let build = || -> fracinv::Result<FullModel> {
            let params = cfg.parameter_map(cfg.build_bases()?, GammaParam::Known(cfg.gamma.value))?;
            FullModel::new(cfg.problem()?, params, cfg.time.dt_solver)
        };
        let m = build().map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(FracinvForward { inner: m })) };
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`fracinv_forward_new`]; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn fracinv_forward_dims(h: *const FracinvForward, n_params: *mut usize, n_obs: *mut usize) -> FracinvStatus {
    guard(|| {
        let h = unsafe { h.as_ref() }.ok_or_else(|| null("handle"))?;
        if let Some(p) = unsafe { n_params.as_mut() } {
            *p = h.inner.n_params();
        }
        if let Some(p) = unsafe { n_obs.as_mut() } {
            *p = h.inner.n_obs();
        }
        Ok(())
    })
}

/// Solve at `z` and write the observations into `out`.
///
/// # Safety
/// `z` must hold `nz` doubles and `out` have room for `nout`.
#[no_mangle]
pub unsafe extern "C" fn fracinv_forward_eval(
    h: *const FracinvForward,
    z: *const f64,
    nz: usize,
    out: *mut f64,
    nout: usize,
) -> FracinvStatus {
    guard(|| {
        let h = unsafe { h.as_ref() }.ok_or_else(|| null("handle"))?;
        check_len("parameter vector", h.inner.n_params(), nz)?;
        check_len("output buffer", h.inner.n_obs(), nout)?;
        let z = unsafe { slice_arg(z, nz, "z")? };
        let out = unsafe { slice_out(out, nout, "out")? };
        let d = h.inner.eval(z).map_err(lib_err)?;
        out.copy_from_slice(d.as_slice());
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`fracinv_forward_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fracinv_forward_free(h: *mut FracinvForward) {
    if !h.is_null() {
        drop(unsafe { Box::from_raw(h) });
    }
}
