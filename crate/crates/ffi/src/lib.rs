//! C ABI over the experiment pipeline.
//!
//! Handles are opaque pointers created and destroyed by this library; every
//! fallible call returns a [`BclStatus`] and stores a printable message
//! retrievable with [`bcl_last_error_message`]. The generated header lives
//! at `include/bcl.h`.

use bcl_core::config::ExperimentConfig;
use bcl_core::error::Error;
use bcl_core::metrics::MetricsReport;
use bcl_core::runner;
use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BclStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration or invalid combination of inputs.
    ConfigError = 3,
    /// File IO or container-format failure.
    IoError = 4,
    /// Numerical failure (degenerate vectors, non-convergence, bad shapes).
    NumericError = 5,
    /// The library panicked; state may be inconsistent.
    Panic = 6,
}

/// Opaque experiment handle (a loaded, validated config).
pub struct BclExperiment {
    cfg: ExperimentConfig,
}

/// Opaque evaluation report handle.
pub struct BclReport {
    report: MetricsReport,
}

/// Scalar fields of a report, for [`bcl_report_metric`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BclMetric {
    MapSelfOld = 0,
    MapSelfNew = 1,
    MapCross = 2,
    Recall1SelfNew = 3,
    Recall1Cross = 4,
    PUp = 5,
    PComp = 6,
    P1 = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> BclStatus {
    match err {
        Error::Config(_) | Error::BadK { .. } => BclStatus::ConfigError,
        Error::Io(_)
        | Error::BadMagic
        | Error::BadVersion(_)
        | Error::Truncated(_)
        | Error::Overlap(_, _)
        | Error::BadSection(_, _)
        | Error::MissingSection(_) => BclStatus::IoError,
        _ => BclStatus::NumericError,
    }
}

fn run_guarded<F: FnOnce() -> Result<BclStatus, Error>>(f: F) -> BclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(err)) => {
            set_last_error(&err.to_string());
            status_of(&err)
        }
        Err(_) => {
            set_last_error("panic inside bcl");
            BclStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for reads.
unsafe fn utf8_arg<'a>(ptr: *const c_char) -> Result<&'a str, BclStatus> {
    if ptr.is_null() {
        set_last_error("null string argument");
        return Err(BclStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("string argument is not valid UTF-8");
        BclStatus::InvalidUtf8
    })
}

/// Load and validate an experiment config (TOML). On success writes a new
/// handle to `out`; release it with [`bcl_experiment_free`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcl_experiment_load(
    path: *const c_char,
    out: *mut *mut BclExperiment,
) -> BclStatus {
    if out.is_null() {
        set_last_error("null output handle");
        return BclStatus::NullArgument;
    }
    let path = match utf8_arg(path) {
        Ok(p) => p.to_string(),
        Err(status) => return status,
    };
    run_guarded(|| {
        let cfg = ExperimentConfig::from_path(Path::new(&path))?;
        let handle = Box::new(BclExperiment { cfg });
        *out = Box::into_raw(handle);
        Ok(BclStatus::Ok)
    })
}

/// # Safety
/// `handle` must be null or a pointer from [`bcl_experiment_load`] that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn bcl_experiment_free(handle: *mut BclExperiment) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

unsafe fn experiment<'a>(handle: *const BclExperiment) -> Result<&'a ExperimentConfig, BclStatus> {
    if handle.is_null() {
        set_last_error("null experiment handle");
        return Err(BclStatus::NullArgument);
    }
    Ok(&(*handle).cfg)
}

/// Generate the dataset container files into the config's output directory.
///
/// # Safety
/// `handle` must be a live pointer from [`bcl_experiment_load`].
#[no_mangle]
pub unsafe extern "C" fn bcl_gen_data(handle: *const BclExperiment) -> BclStatus {
    let cfg = match experiment(handle) {
        Ok(c) => c,
        Err(s) => return s,
    };
    run_guarded(|| {
        runner::gen_data(cfg)?;
        Ok(BclStatus::Ok)
    })
}

/// Train the old model (cross-entropy only).
///
/// # Safety
/// `handle` must be a live pointer from [`bcl_experiment_load`].
#[no_mangle]
pub unsafe extern "C" fn bcl_train_old(handle: *const BclExperiment) -> BclStatus {
    let cfg = match experiment(handle) {
        Ok(c) => c,
        Err(s) => return s,
    };
    run_guarded(|| {
        runner::train_old_cmd(cfg)?;
        Ok(BclStatus::Ok)
    })
}

/// Train the new model. `method` selects the compatibility method
/// ("baseline", "ndpp", "ndpp-old", "odpp", "odpp-old"); pass NULL to train
/// an independent new model that needs no old checkpoint.
///
/// # Safety
/// `handle` must be a live pointer from [`bcl_experiment_load`]; `method`
/// must be null or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bcl_train_new(
    handle: *const BclExperiment,
    method: *const c_char,
) -> BclStatus {
    let cfg = match experiment(handle) {
        Ok(c) => c,
        Err(s) => return s,
    };
    let kind = if method.is_null() {
        None
    } else {
        match utf8_arg(method) {
            Ok(k) => Some(k.to_string()),
            Err(s) => return s,
        }
    };
    run_guarded(|| {
        match kind {
            None => {
                runner::train_new_independent_cmd(cfg)?;
            }
            Some(kind) => {
                let m = runner::method_from_config(cfg, &kind)?;
                runner::train_new_cmd(cfg, &m)?;
            }
        }
        Ok(BclStatus::Ok)
    })
}

/// Evaluate an old/new checkpoint pair and hand back a report handle.
/// Release it with [`bcl_report_free`].
///
/// # Safety
/// `handle` must be a live experiment handle; `old_ckpt` and `new_ckpt`
/// valid NUL-terminated paths; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcl_eval(
    handle: *const BclExperiment,
    old_ckpt: *const c_char,
    new_ckpt: *const c_char,
    out: *mut *mut BclReport,
) -> BclStatus {
    let cfg = match experiment(handle) {
        Ok(c) => c,
        Err(s) => return s,
    };
    if out.is_null() {
        set_last_error("null output handle");
        return BclStatus::NullArgument;
    }
    let old = match utf8_arg(old_ckpt) {
        Ok(p) => PathBuf::from(p),
        Err(s) => return s,
    };
    let new = match utf8_arg(new_ckpt) {
        Ok(p) => PathBuf::from(p),
        Err(s) => return s,
    };
    run_guarded(|| {
        let output = runner::eval_cmd(cfg, &old, &new, None)?;
        let handle = Box::new(BclReport {
            report: output.report,
        });
        *out = Box::into_raw(handle);
        Ok(BclStatus::Ok)
    })
}

/// # Safety
/// `report` must be null or a pointer from [`bcl_eval`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bcl_report_free(report: *mut BclReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Read one scalar metric out of a report.
///
/// # Safety
/// `report` must be a live pointer from [`bcl_eval`], `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcl_report_metric(
    report: *const BclReport,
    metric: BclMetric,
    out: *mut f64,
) -> BclStatus {
    if report.is_null() || out.is_null() {
        set_last_error("null argument");
        return BclStatus::NullArgument;
    }
    let r = &(*report).report;
    *out = match metric {
        BclMetric::MapSelfOld => r.map_self_old,
        BclMetric::MapSelfNew => r.map_self_new,
        BclMetric::MapCross => r.map_cross,
        BclMetric::Recall1SelfNew => r.recall1_self_new,
        BclMetric::Recall1Cross => r.recall1_cross,
        BclMetric::PUp => r.p_up,
        BclMetric::PComp => r.p_comp,
        BclMetric::P1 => r.p_1,
    };
    BclStatus::Ok
}

/// Whether the report satisfied the empirical compatibility criterion
/// (cross-test above the old self-test). Writes 1 or 0.
///
/// # Safety
/// `report` must be a live pointer from [`bcl_eval`], `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bcl_report_compatible(
    report: *const BclReport,
    out: *mut i32,
) -> BclStatus {
    if report.is_null() || out.is_null() {
        set_last_error("null argument");
        return BclStatus::NullArgument;
    }
    *out = i32::from((*report).report.compatible);
    BclStatus::Ok
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null (to query the length) or valid for writes of `cap`
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn bcl_last_error_message(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn bcl_status_name(status: BclStatus) -> *const c_char {
    let name: &'static [u8] = match status {
        BclStatus::Ok => b"ok\0",
        BclStatus::NullArgument => b"null argument\0",
        BclStatus::InvalidUtf8 => b"invalid utf-8\0",
        BclStatus::ConfigError => b"config error\0",
        BclStatus::IoError => b"io error\0",
        BclStatus::NumericError => b"numeric error\0",
        BclStatus::Panic => b"panic\0",
    };
    name.as_ptr() as *const c_char
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn bcl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
