//! C ABI over `saf-core`.
//!
//! Every entry point returns a [`SafStatus`]; on anything other than
//! `SAF_STATUS_OK` the message is available from [`saf_last_error`] on the same
//! thread until the next failing call. Handles are opaque and must be
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use saf_core::harness::{run_experiment, ExperimentConfig, MetricsRow, OptimizerKind, RunResult};
use saf_core::optim::CosineSchedule;
use saf_core::saf::buffer_bytes;
use saf_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SafStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    Shape = 7,
    Contract = 8,
    Unavailable = 9,
    OutOfRange = 10,
    Panic = 11,
}

/// Training configuration. Create with [`saf_config_new`] or
/// [`saf_config_load`].
pub struct SafConfig {
    inner: ExperimentConfig,
}

/// Completed training run.
pub struct SafRun {
    inner: RunResult,
}

/// One row of the per-epoch metrics table.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SafMetricsRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub trajectory_loss: f64,
    pub sharpness_exact: f64,
    pub sharpness_proxy: f64,
    pub lr: f64,
    pub epoch_wall_ms: u64,
}

impl From<&MetricsRow> for SafMetricsRow {
    fn from(r: &MetricsRow) -> Self {
        Self {
            epoch: r.epoch as u64,
            train_loss: r.train_loss,
            train_acc: r.train_acc,
            test_loss: r.test_loss,
            test_acc: r.test_acc,
            trajectory_loss: r.trajectory_loss,
            sharpness_exact: r.sharpness_exact,
            sharpness_proxy: r.sharpness_proxy,
            lr: r.lr,
            epoch_wall_ms: r.epoch_wall_ms,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(SafStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => SafStatus::Shape,
            Error::Numeric(_) => SafStatus::Numeric,
            Error::Contract(_) => SafStatus::Contract,
            Error::Format { .. } => SafStatus::Format,
            Error::Config { .. } => SafStatus::Config,
            Error::Availability(_) => SafStatus::Unavailable,
            Error::Io { .. } => SafStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SafStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SafStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            SafStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SafStatus::NullArgument, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SafStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failing call on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn saf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default configuration for `optimizer` (`"sgd"`, `"sam"`, `"saf"` or `"mesa"`).
///
/// # Safety
/// `optimizer` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn saf_config_new(
    optimizer: *const c_char,
    out: *mut *mut SafConfig,
) -> SafStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let kind: OptimizerKind = text(optimizer, "optimizer")?.parse()?;
        *out = Box::into_raw(Box::new(SafConfig {
            inner: ExperimentConfig::new(kind),
        }));
        Ok(())
    })
}

/// Reads a `key = value` config file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn saf_config_load(
    path: *const c_char,
    out: *mut *mut SafConfig,
) -> SafStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = ExperimentConfig::load(Path::new(text(path, "path")?), &[])?;
        *out = Box::into_raw(Box::new(SafConfig { inner: cfg }));
        Ok(())
    })
}

/// Sets one config key. The config is left unchanged on failure.
///
/// # Safety
/// `config` must come from this library; `key` and `value` must be
/// nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn saf_config_set(
    config: *mut SafConfig,
    key: *const c_char,
    value: *const c_char,
) -> SafStatus {
    guard(|| {
        let config = out_ptr(config, "config")?;
        let mut next = config.inner.clone();
        next.set(text(key, "key")?, text(value, "value")?)?;
        next.validate()?;
        config.inner = next;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn saf_config_free(config: *mut SafConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Trains to completion. Writes outputs only if `out_dir` is set in the config.
///
/// # Safety
/// `config` must come from this library and `out` be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn saf_run(config: *const SafConfig, out: *mut *mut SafRun) -> SafStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        let result = run_experiment(&config.inner)?;
        *out = Box::into_raw(Box::new(SafRun { inner: result }));
        Ok(())
    })
}

/// Number of completed epochs, i.e. metrics rows.
///
/// # Safety
/// `run` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn saf_run_epochs(run: *const SafRun) -> usize {
    run.as_ref().map_or(0, |r| r.inner.rows.len())
}

/// Copies metrics row `index` (0-based) into `out`.
///
/// # Safety
/// `run` must come from this library and `out` be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn saf_run_metrics(
    run: *const SafRun,
    index: usize,
    out: *mut SafMetricsRow,
) -> SafStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let row = run.inner.rows.get(index).ok_or_else(|| {
            Failure(
                SafStatus::OutOfRange,
                format!("row {index} of {}", run.inner.rows.len()),
            )
        })?;
        *out = row.into();
        Ok(())
    })
}

/// Copies the final weights into `buf` if it holds at least as many values.
/// `len_out` always receives the number of weights, so a null `buf` queries
/// the size.
///
/// # Safety
/// `run` must come from this library, `len_out` be writable, and `buf`
/// either null or valid for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn saf_run_weights(
    run: *const SafRun,
    buf: *mut f64,
    capacity: usize,
    len_out: *mut usize,
) -> SafStatus {
    guard(|| {
        let len_out = out_ptr(len_out, "len_out")?;
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let weights: &[f64] = &run.inner.weights;
        *len_out = weights.len();
        if buf.is_null() {
            return Ok(());
        }
        if capacity < weights.len() {
            return Err(Failure(
                SafStatus::OutOfRange,
                format!("buffer holds {capacity} values, need {}", weights.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buf, weights.len()).copy_from_slice(weights);
        Ok(())
    })
}

/// # Safety
/// `run` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn saf_run_free(run: *mut SafRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Bytes needed to keep `lag` epochs of float32 outputs for `examples`
/// examples and `classes` classes.
#[no_mangle]
pub extern "C" fn saf_memory_model_bytes(examples: u64, classes: u64, lag: u64) -> u64 {
    buffer_bytes(examples, classes, lag)
}

/// Cosine-annealed learning rate at `step` of `total_steps`.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn saf_cosine_lr(
    peak: f64,
    step: usize,
    total_steps: usize,
    out: *mut f64,
) -> SafStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = CosineSchedule::new(peak, total_steps).lr(step)?;
        Ok(())
    })
}
