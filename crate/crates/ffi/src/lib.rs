//! C ABI over `qpi-core`: load datasets and models, run inference, query
//! predictions. Objects are opaque heap handles released with the matching
//! `*_free` function. Every fallible call returns a [`QpiStatus`]; the text
//! of the most recent error on the calling thread is available from
//! [`qpi_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use qpi_core::data::Dataset;
use qpi_core::inference::{infer, InferenceOptions};
use qpi_core::{Model, QpiError};

/// Result codes of all fallible calls.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpiStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid configuration or input values.
    InvalidInput = 2,
    /// File could not be read or written.
    Io = 3,
    /// File contents are malformed.
    Format = 4,
    /// A numerical routine failed.
    Numeric = 5,
    /// Output buffer too small.
    BufferTooSmall = 6,
    /// Internal panic caught at the boundary.
    Internal = 7,
}

/// Opaque inferred or loaded model.
pub struct QpiModel {
    inner: Model,
}

/// Opaque dataset of experiment records.
pub struct QpiDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(err: &QpiError) -> QpiStatus {
    match err {
        QpiError::Io(_) => QpiStatus::Io,
        QpiError::Format(_)
        | QpiError::MalformedLine { .. }
        | QpiError::CoverageGap { .. }
        | QpiError::DuplicateKey { .. } => QpiStatus::Format,
        QpiError::Config(_) | QpiError::Input(_) | QpiError::Dimension(_) => QpiStatus::InvalidInput,
        _ => QpiStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (QpiStatus, String)>) -> QpiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            QpiStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            QpiStatus::Internal
        }
    }
}

fn lift<T>(r: qpi_core::Result<T>) -> Result<T, (QpiStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (QpiStatus, String) {
    (QpiStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, (QpiStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s =
        CStr::from_ptr(path).to_str().map_err(|_| (QpiStatus::InvalidInput, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Message of the most recent failed call on this thread, or an empty
/// string. The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn qpi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads a dataset file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qpi_dataset_load(path: *const c_char, out: *mut *mut QpiDataset) -> QpiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ds = lift(Dataset::read(&path_arg(path)?))?;
        *out = Box::into_raw(Box::new(QpiDataset { inner: ds }));
        Ok(())
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `ds` must come from [`qpi_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qpi_dataset_free(ds: *mut QpiDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Reads a model file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qpi_model_load(path: *const c_char, out: *mut *mut QpiModel) -> QpiStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = lift(Model::load(&path_arg(path)?))?;
        *out = Box::into_raw(Box::new(QpiModel { inner: m }));
        Ok(())
    })
}

/// Writes a model file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qpi_model_save(model: *const QpiModel, path: *const c_char) -> QpiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        lift(m.inner.save(&path_arg(path)?))
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qpi_model_free(model: *mut QpiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model dimension, number of initial states and number of measurements.
///
/// # Safety
/// `model` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn qpi_model_shape(
    model: *const QpiModel,
    dimension: *mut usize,
    n_init: *mut usize,
    n_meas: *mut usize,
) -> QpiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if let Some(d) = dimension.as_mut() {
            *d = m.inner.dim();
        }
        if let Some(n) = n_init.as_mut() {
            *n = m.inner.init_labels().len();
        }
        if let Some(n) = n_meas.as_mut() {
            *n = m.inner.meas_labels().len();
        }
        Ok(())
    })
}

/// Predicted probabilities `S·T^t·P` written row-major into `buf`, which
/// must hold `n_init * n_meas` values.
///
/// # Safety
/// `model` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn qpi_model_predict(model: *const QpiModel, t: u64, buf: *mut f64, len: usize) -> QpiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let f = lift(m.inner.predict(t))?;
        if len < f.len() {
            return Err((QpiStatus::BufferTooSmall, format!("buffer holds {len} values, need {}", f.len())));
        }
        let out = std::slice::from_raw_parts_mut(buf, f.len());
        for i in 0..f.nrows() {
            for j in 0..f.ncols() {
                out[i * f.ncols() + j] = f[(i, j)];
            }
        }
        Ok(())
    })
}

/// Runs the full inference with default options; `dimension > 0` fixes the
/// model dimension instead of estimating it.
///
/// # Safety
/// `ds` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qpi_infer(ds: *const QpiDataset, dimension: usize, out: *mut *mut QpiModel) -> QpiStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let mut opts = InferenceOptions::default();
        if dimension > 0 {
            opts.fixed_dimension = Some(dimension);
        }
        let result = lift(infer(&ds.inner, &opts))?;
        *out = Box::into_raw(Box::new(QpiModel { inner: result.model }));
        Ok(())
    })
}
