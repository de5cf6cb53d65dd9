//! C ABI over `ace-core`.
//!
//! Models are opaque `AceModel` handles created by [`ace_model_load`] and
//! released with [`ace_model_free`]. Every fallible call returns an
//! [`AceStatus`]; on failure, [`ace_last_error`] describes the problem for
//! the calling thread. Rows are arrays of `double` in original units, with
//! NaN marking a cell that is not observed and category indices for
//! categorical features.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ace_core::checkpoint::Checkpoint;
use ace_core::AceError;

/// A loaded checkpoint.
pub struct AceModel {
    checkpoint: Checkpoint,
}

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    Runtime = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &AceError) -> AceStatus {
    match e {
        AceError::Config(_) | AceError::Usage(_) => AceStatus::InvalidArgument,
        AceError::Io { .. } => AceStatus::Io,
        AceError::Format(_) | AceError::Json(_) => AceStatus::Format,
        AceError::Data { .. } => AceStatus::Data,
        AceError::NonFinite(_) | AceError::Training(_) => AceStatus::Runtime,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (AceStatus, String)>) -> AceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AceStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            AceStatus::Panic
        }
    }
}

fn lift(e: AceError) -> (AceStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (AceStatus, String) {
    (AceStatus::NullPointer, format!("`{what}` is NULL"))
}

fn model_ref<'a>(model: *const AceModel) -> Result<&'a AceModel, (AceStatus, String)> {
    // SAFETY: non-null handles come from `ace_model_load` and stay valid until `ace_model_free`.
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

fn check_len(model: &AceModel, len: usize) -> Result<(), (AceStatus, String)> {
    let d = model.checkpoint.model.dims();
    if len != d {
        return Err((AceStatus::InvalidArgument, format!("row length {len} does not match the model's {d} features")));
    }
    Ok(())
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ace_model_load(path: *const c_char, out: *mut *mut AceModel) -> AceStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (AceStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let checkpoint = Checkpoint::load(Path::new(path)).map_err(lift)?;
        unsafe { *out = Box::into_raw(Box::new(AceModel { checkpoint })) };
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from `ace_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ace_model_free(model: *mut AceModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of features, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ace_model_num_features(model: *const AceModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.checkpoint.model.dims())
}

/// Autoregressive `log p(x_u | x_o)` in original units, where `o` holds the
/// features with `observed[i] != 0` and `u` the other non-NaN features.
/// Writes the energy estimate to `*out_energy` and the proposal-only value
/// to `*out_proposal` (either may be NULL).
///
/// # Safety
/// `values` and `observed` must point to `len` elements.
#[no_mangle]
pub unsafe extern "C" fn ace_log_likelihood(
    model: *const AceModel,
    values: *const f64,
    observed: *const u8,
    len: usize,
    samples: usize,
    seed: u64,
    out_energy: *mut f64,
    out_proposal: *mut f64,
) -> AceStatus {
    guard(|| {
        let m = model_ref(model)?;
        if values.is_null() {
            return Err(null("values"));
        }
        if observed.is_null() {
            return Err(null("observed"));
        }
        check_len(m, len)?;
        let row = unsafe { std::slice::from_raw_parts(values, len) };
        let obs: Vec<bool> = unsafe { std::slice::from_raw_parts(observed, len) }.iter().map(|&b| b != 0).collect();
        let ll = m.checkpoint.log_likelihood_row(row, &obs, samples, seed).map_err(lift)?;
        if !out_energy.is_null() {
            unsafe { *out_energy = ll.energy };
        }
        if !out_proposal.is_null() {
            unsafe { *out_proposal = ll.proposal };
        }
        Ok(())
    })
}

/// Replaces NaN cells of `values` with conditional means (modes for
/// categorical features) given the other cells.
///
/// # Safety
/// `values` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn ace_impute(model: *const AceModel, values: *mut f64, len: usize, samples: usize, seed: u64) -> AceStatus {
    guard(|| {
        let m = model_ref(model)?;
        if values.is_null() {
            return Err(null("values"));
        }
        check_len(m, len)?;
        let row = unsafe { std::slice::from_raw_parts_mut(values, len) };
        let filled = m.checkpoint.impute_row(row, samples, seed).map_err(lift)?;
        row.copy_from_slice(&filled);
        Ok(())
    })
}

/// Replaces NaN cells of `values` with one joint sample given the other
/// cells. `candidates` is the resampling pool per step; 1 samples the
/// proposal directly.
///
/// # Safety
/// `values` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn ace_sample(model: *const AceModel, values: *mut f64, len: usize, candidates: usize, seed: u64) -> AceStatus {
    guard(|| {
        let m = model_ref(model)?;
        if values.is_null() {
            return Err(null("values"));
        }
        check_len(m, len)?;
        let row = unsafe { std::slice::from_raw_parts_mut(values, len) };
        let filled = m.checkpoint.sample_row(row, candidates, seed).map_err(lift)?;
        row.copy_from_slice(&filled);
        Ok(())
    })
}

/// Message for the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ace_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ace_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
