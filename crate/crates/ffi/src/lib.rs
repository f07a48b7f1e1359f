//! C ABI over the experiment runner.
//!
//! Every function returns a [`RestStatus`]. On failure the message is
//! available from [`rest_last_error`] on the same thread. Handles are opaque
//! and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rest_core::cli::{flops_report_counts, parse_config_with, run, MetricsRow, RunConfig, RunError};
use rest_core::error::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RestStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    TrainingAborted = 4,
    Io = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// A parsed run configuration.
pub struct RestConfig(RunConfig);

/// Metrics rows produced by [`rest_run`].
pub struct RestRunResult(Vec<MetricsRow>);

/// Numeric columns of one metrics row.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RestMetrics {
    pub seed: u64,
    pub step: u64,
    pub density: f64,
    pub conflict_ratio: f64,
    pub beta: f64,
    pub train_loss: f64,
    pub overall_acc: f64,
    pub unbiased_acc: f64,
    pub conflicting_acc: f64,
    pub worst_group_acc: f64,
    pub params_active: u64,
    pub cumulative_train_flops: u64,
}

/// Parameter and FLOP counts of a configured model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RestFlops {
    pub params_total: u64,
    pub params_active: u64,
    pub infer_flops_per_example: u64,
    pub train_flops_per_step: u64,
    pub dense_train_flops_per_step: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: RestStatus, message: impl Into<String>) -> RestStatus {
    set_error(message);
    status
}

fn core_status(e: &Error) -> RestStatus {
    match e {
        Error::Io(_) => RestStatus::Io,
        Error::Training(_) | Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => RestStatus::TrainingAborted,
        _ => RestStatus::Config,
    }
}

fn guarded(f: impl FnOnce() -> RestStatus) -> RestStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(RestStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, RestStatus> {
    if p.is_null() {
        return Err(fail(RestStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(RestStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rest_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses `key = value` config text. With `strict == 0` unknown keys are
/// ignored.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rest_config_parse(text: *const c_char, strict: i32, out: *mut *mut RestConfig) -> RestStatus {
    guarded(|| {
        if out.is_null() {
            return fail(RestStatus::NullArgument, "out is null");
        }
        let text = try_status!(str_arg(text, "text"));
        match parse_config_with(text, strict != 0) {
            Ok((config, _)) => {
                *out = Box::into_raw(Box::new(RestConfig(config)));
                RestStatus::Ok
            }
            Err(e) => fail(core_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `config` must come from [`rest_config_parse`] or be null.
#[no_mangle]
pub unsafe extern "C" fn rest_config_free(config: *mut RestConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Trains every seed and writes the metrics CSV to `out_csv`. On success
/// `*out` receives the rows. If training aborts, the partial CSV and its
/// `.partial` marker are still written.
///
/// # Safety
/// `config` must be a live handle, `seeds` must point to `n_seeds` values,
/// `out_csv` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rest_run(
    config: *const RestConfig,
    seeds: *const u64,
    n_seeds: usize,
    out_csv: *const c_char,
    out: *mut *mut RestRunResult,
) -> RestStatus {
    guarded(|| {
        if config.is_null() || out.is_null() || (seeds.is_null() && n_seeds > 0) {
            return fail(RestStatus::NullArgument, "config, seeds or out is null");
        }
        let path = PathBuf::from(try_status!(str_arg(out_csv, "out_csv")));
        let seeds = if n_seeds == 0 { &[][..] } else { std::slice::from_raw_parts(seeds, n_seeds) };
        match run(&(*config).0, seeds, &path) {
            Ok(rows) => {
                *out = Box::into_raw(Box::new(RestRunResult(rows)));
                RestStatus::Ok
            }
            Err(e) => {
                let status = match e {
                    RunError::Config(_) => RestStatus::Config,
                    RunError::Aborted(_) => RestStatus::TrainingAborted,
                    RunError::Io(_) => RestStatus::Io,
                };
                fail(status, e.to_string())
            }
        }
    })
}

/// # Safety
/// `result` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn rest_run_result_len(result: *const RestRunResult) -> usize {
    if result.is_null() {
        0
    } else {
        (*result).0.len()
    }
}

/// Copies row `index` into `*out`.
///
/// # Safety
/// `result` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rest_run_result_row(result: *const RestRunResult, index: usize, out: *mut RestMetrics) -> RestStatus {
    guarded(|| {
        if result.is_null() || out.is_null() {
            return fail(RestStatus::NullArgument, "result or out is null");
        }
        let rows = &(*result).0;
        let Some(r) = rows.get(index) else {
            return fail(RestStatus::OutOfRange, format!("row {index} of {}", rows.len()));
        };
        *out = RestMetrics {
            seed: r.seed,
            step: r.step as u64,
            density: r.density,
            conflict_ratio: r.conflict_ratio,
            beta: r.beta,
            train_loss: r.train_loss,
            overall_acc: r.overall_acc,
            unbiased_acc: r.unbiased_acc,
            conflicting_acc: r.conflicting_acc,
            worst_group_acc: r.worst_group_acc,
            params_active: r.params_active,
            cumulative_train_flops: r.cumulative_train_flops,
        };
        RestStatus::Ok
    })
}

/// # Safety
/// `result` must come from [`rest_run`] or be null.
#[no_mangle]
pub unsafe extern "C" fn rest_run_result_free(result: *mut RestRunResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Parameter and FLOP counts at the configured density.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rest_flops(config: *const RestConfig, out: *mut RestFlops) -> RestStatus {
    guarded(|| {
        if config.is_null() || out.is_null() {
            return fail(RestStatus::NullArgument, "config or out is null");
        }
        match flops_report_counts(&(*config).0) {
            Ok((sparse, dense)) => {
                *out = RestFlops {
                    params_total: sparse.params_total,
                    params_active: sparse.params_active,
                    infer_flops_per_example: sparse.infer_flops_per_example,
                    train_flops_per_step: sparse.train_flops_per_step,
                    dense_train_flops_per_step: dense.train_flops_per_step,
                };
                RestStatus::Ok
            }
            Err(e) => fail(core_status(&e), e.to_string()),
        }
    })
}

/// Writes `train.rstd` and `test.rstd` under `dir`.
///
/// # Safety
/// `config` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rest_gen_data(config: *const RestConfig, dir: *const c_char) -> RestStatus {
    guarded(|| {
        if config.is_null() {
            return fail(RestStatus::NullArgument, "config is null");
        }
        let dir = PathBuf::from(try_status!(str_arg(dir, "dir")));
        match rest_core::cli::gen_data(&(*config).0, &dir) {
            Ok(_) => RestStatus::Ok,
            Err(e) => fail(core_status(&e), e.to_string()),
        }
    })
}
