//! C ABI for `ssvb`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns an
//! [`SsvbStatus`]; on failure a description is available from
//! [`ssvb_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use ssvb::{standardize, Algorithm, Error, FitResult, Hyperparameters, RawDataset, SolverConfig, StandardizedDataset};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsvbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidData = 3,
    Numerical = 4,
    Panic = 5,
}

/// Solver selector for [`ssvb_fit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsvbAlgorithm {
    Componentwise = 1,
    Batch = 2,
}

/// A standardized design and response.
pub struct SsvbDataset {
    data: StandardizedDataset,
}

/// A fitted model.
pub struct SsvbFit {
    fit: FitResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> SsvbStatus {
    match err {
        Error::ConstantColumn(_) | Error::NonFinite | Error::DimensionMismatch(_) | Error::InvalidInput(_) => {
            SsvbStatus::InvalidData
        }
        Error::InvalidHyperparameter(_) | Error::DegeneratePrior => SsvbStatus::InvalidArgument,
        _ => SsvbStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SsvbStatus, String)>) -> SsvbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsvbStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SsvbStatus::Panic
        }
    }
}

fn lib_err(err: Error) -> (SsvbStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(name: &str) -> (SsvbStatus, String) {
    (SsvbStatus::NullPointer, format!("{name} is null"))
}

/// Copies `y` (length `n`) and the row-major `n × p` matrix `x`, centers and
/// scales them, and stores a new dataset handle in `*out`.
///
/// # Safety
/// `y` must point to `n` doubles, `x` to `n * p` doubles, and `out` to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ssvb_dataset_new(
    y: *const f64,
    x: *const f64,
    n: usize,
    p: usize,
    out: *mut *mut SsvbDataset,
) -> SsvbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if y.is_null() {
            return Err(null("y"));
        }
        if x.is_null() {
            return Err(null("x"));
        }
        let len = n.checked_mul(p).filter(|_| n > 0 && p > 0);
        let Some(len) = len else {
            return Err((SsvbStatus::InvalidArgument, format!("invalid shape {n} x {p}")));
        };
        let y = DVector::from_column_slice(std::slice::from_raw_parts(y, n));
        let x = DMatrix::from_row_slice(n, p, std::slice::from_raw_parts(x, len));
        let raw = RawDataset::new(y, x).map_err(lib_err)?;
        let data = standardize(&raw).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SsvbDataset { data }));
        Ok(())
    })
}

/// Number of features in `dataset`, or 0 when it is null.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssvb_dataset_p(dataset: *const SsvbDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.p())
}

/// # Safety
/// `dataset` must be null or a handle from [`ssvb_dataset_new`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn ssvb_dataset_free(dataset: *mut SsvbDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Fits `dataset` with slab scale `v1` and default priors. `algorithm` is an
/// [`SsvbAlgorithm`] value. A run that hits the iteration cap still succeeds;
/// see [`ssvb_fit_converged`].
///
/// # Safety
/// `dataset` must be a live handle and `out` writable storage for one
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn ssvb_fit(
    dataset: *const SsvbDataset,
    algorithm: i32,
    v1: f64,
    out: *mut *mut SsvbFit,
) -> SsvbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let Some(dataset) = dataset.as_ref() else {
            return Err(null("dataset"));
        };
        let algorithm = match algorithm {
            x if x == SsvbAlgorithm::Componentwise as i32 => Algorithm::Componentwise,
            x if x == SsvbAlgorithm::Batch as i32 => Algorithm::Batch,
            other => return Err((SsvbStatus::InvalidArgument, format!("unknown algorithm {other}"))),
        };
        let hp = Hyperparameters::default().with_v1(v1);
        let fit = ssvb::fit(&dataset.data, &hp, algorithm, &SolverConfig::default().lean()).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SsvbFit { fit }));
        Ok(())
    })
}

/// 1 when the fit met its convergence tolerance, 0 otherwise (or when null).
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssvb_fit_converged(fit: *const SsvbFit) -> i32 {
    fit.as_ref().map_or(0, |f| f.fit.converged as i32)
}

/// Number of features with inclusion probability above 1/2.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ssvb_fit_selected_count(fit: *const SsvbFit) -> usize {
    fit.as_ref().map_or(0, |f| f.fit.selected.len())
}

unsafe fn copy_out(fit: *const SsvbFit, out: *mut f64, len: usize, pick: fn(&FitResult) -> &DVector<f64>) -> SsvbStatus {
    guard(|| {
        let Some(fit) = fit.as_ref() else {
            return Err(null("fit"));
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let v = pick(&fit.fit);
        if len != v.len() {
            return Err((SsvbStatus::InvalidArgument, format!("buffer holds {len} values, need {}", v.len())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(v.as_slice());
        Ok(())
    })
}

/// Copies the `p` inclusion probabilities into `out`.
///
/// # Safety
/// `fit` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ssvb_fit_phi(fit: *const SsvbFit, out: *mut f64, len: usize) -> SsvbStatus {
    copy_out(fit, out, len, |f| &f.state.phi)
}

/// Copies the `p` slab means (standardized scale) into `out`.
///
/// # Safety
/// `fit` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ssvb_fit_mu(fit: *const SsvbFit, out: *mut f64, len: usize) -> SsvbStatus {
    copy_out(fit, out, len, |f| &f.state.mu)
}

/// Serializes the fit as JSON into a new string owned by the caller; free it
/// with [`ssvb_string_free`].
///
/// # Safety
/// `fit` must be a live handle and `out` writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ssvb_fit_to_json(fit: *const SsvbFit, out: *mut *mut c_char) -> SsvbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let Some(fit) = fit.as_ref() else {
            return Err(null("fit"));
        };
        let text = serde_json::to_string(&fit.fit.to_json()).map_err(|e| (SsvbStatus::Numerical, e.to_string()))?;
        let text = CString::new(text).map_err(|e| (SsvbStatus::Numerical, e.to_string()))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle from [`ssvb_fit`] that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn ssvb_fit_free(fit: *mut SsvbFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library that has not been
/// freed.
#[no_mangle]
pub unsafe extern "C" fn ssvb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ssvb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}
