//! C ABI for the cell search engine.
//!
//! All functions are panic-safe and communicate failure through
//! [`NasuStatus`] codes mirroring the CLI exit codes; the last error
//! message is kept per thread and read back with `nasu_last_error`.
//! `NasuConfig` is an opaque handle created by `nasu_config_default` /
//! `nasu_config_load` and released with `nasu_config_free`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use libc::c_char;
use nasu::cli;
use nasu::config::RunConfig;
use nasu::error::Error;
use nasu::report::EvalReport;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NasuStatus {
    Ok = 0,
    /// Invalid configuration or arguments.
    ConfigError = 2,
    /// Missing or malformed data files.
    DataError = 3,
    /// Numeric divergence during optimization.
    NumericError = 4,
    /// A null pointer or non-UTF-8 string was passed in.
    InvalidArgument = 64,
    /// An internal panic was caught; see `nasu_last_error`.
    Panic = 70,
}

/// Aggregate segmentation metrics of a completed run.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct NasuMetrics {
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub dsc: f64,
    pub num_pixels: u64,
}

/// Opaque run configuration handle.
pub struct NasuConfig {
    inner: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").expect("empty"));
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_else(|_| CString::new("error").expect("ascii"));
    });
}

fn status_of(err: &Error) -> NasuStatus {
    match err.exit_code() {
        2 => NasuStatus::ConfigError,
        3 => NasuStatus::DataError,
        _ => NasuStatus::NumericError,
    }
}

fn guard<F: FnOnce() -> NasuStatus>(f: F) -> NasuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            set_error(&msg);
            NasuStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string valid for the call.
unsafe fn require_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, NasuStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} must not be null"));
        return Err(NasuStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} must be valid UTF-8"));
        NasuStatus::InvalidArgument
    })
}

unsafe fn optional_path(ptr: *const c_char) -> Result<Option<PathBuf>, NasuStatus> {
    if ptr.is_null() {
        return Ok(None);
    }
    Ok(Some(PathBuf::from(require_str(ptr, "path")?)))
}

fn run_command<F>(config: *const NasuConfig, out_dir: *const c_char, f: F) -> NasuStatus
where
    F: FnOnce(&RunConfig, &Path) -> nasu::Result<String>,
{
    guard(|| {
        if config.is_null() {
            set_error("config handle must not be null");
            return NasuStatus::InvalidArgument;
        }
        let cfg = unsafe { &(*config).inner };
        let out = match unsafe { require_str(out_dir, "out_dir") } {
            Ok(s) => PathBuf::from(s),
            Err(status) => return status,
        };
        if let Err(e) = cfg.validate() {
            set_error(&e.to_string());
            return status_of(&e);
        }
        match f(cfg, &out) {
            Ok(_) => NasuStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Engine version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn nasu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent failure on this thread. Valid until the next
/// call into the library from the same thread; do not free.
#[no_mangle]
pub extern "C" fn nasu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Fresh configuration with default (desk-scale) values.
#[no_mangle]
pub extern "C" fn nasu_config_default() -> *mut NasuConfig {
    Box::into_raw(Box::new(NasuConfig { inner: RunConfig::default() }))
}

/// Parse a key=value configuration file; returns null on failure (see
/// `nasu_last_error`).
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn nasu_config_load(path: *const c_char) -> *mut NasuConfig {
    let result = catch_unwind(|| {
        let path = match require_str(path, "path") {
            Ok(p) => p,
            Err(_) => return std::ptr::null_mut(),
        };
        match RunConfig::parse_file(Path::new(path)) {
            Ok(inner) => Box::into_raw(Box::new(NasuConfig { inner })),
            Err(e) => {
                set_error(&e.to_string());
                std::ptr::null_mut()
            }
        }
    });
    result.unwrap_or(std::ptr::null_mut())
}

/// Set one configuration key, e.g. ("search.epochs", "30").
///
/// # Safety
/// `config` must come from this library; `key`/`value` must be
/// NUL-terminated UTF-8 strings.
#[no_mangle]
pub unsafe extern "C" fn nasu_config_set(
    config: *mut NasuConfig,
    key: *const c_char,
    value: *const c_char,
) -> NasuStatus {
    guard(|| {
        if config.is_null() {
            set_error("config handle must not be null");
            return NasuStatus::InvalidArgument;
        }
        let (key, value) = match (require_str(key, "key"), require_str(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match (*config).inner.set_key(key, value) {
            Ok(()) => NasuStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Apply the full-scale reference hyper-parameters.
///
/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn nasu_config_apply_paper_faithful(config: *mut NasuConfig) -> NasuStatus {
    guard(|| {
        if config.is_null() {
            set_error("config handle must not be null");
            return NasuStatus::InvalidArgument;
        }
        (*config).inner.apply_paper_faithful();
        NasuStatus::Ok
    })
}

/// Release a configuration handle. Null is a no-op.
///
/// # Safety
/// `config` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nasu_config_free(config: *mut NasuConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Generate the synthetic dataset into `out_dir`.
///
/// # Safety
/// Pointer arguments as documented on [`nasu_config_set`].
#[no_mangle]
pub unsafe extern "C" fn nasu_run_synth(config: *const NasuConfig, out_dir: *const c_char) -> NasuStatus {
    run_command(config, out_dir, |cfg, out| cli::cmd_synth(cfg, out))
}

/// Apply morphology / augmentation to the configured dataset.
///
/// # Safety
/// Pointer arguments as documented on [`nasu_config_set`].
#[no_mangle]
pub unsafe extern "C" fn nasu_run_preprocess(config: *const NasuConfig, out_dir: *const c_char) -> NasuStatus {
    run_command(config, out_dir, |cfg, out| cli::cmd_preprocess(cfg, out))
}

/// Run the architecture search; `resume` may be null or a checkpoint path.
///
/// # Safety
/// Pointer arguments as documented on [`nasu_config_set`].
#[no_mangle]
pub unsafe extern "C" fn nasu_run_search(
    config: *const NasuConfig,
    out_dir: *const c_char,
    resume: *const c_char,
) -> NasuStatus {
    let resume = match optional_path(resume) {
        Ok(r) => r,
        Err(s) => return s,
    };
    run_command(config, out_dir, |cfg, out| cli::cmd_search(cfg, out, resume.as_deref()))
}

/// Extract genotypes from the configured search checkpoint.
///
/// # Safety
/// Pointer arguments as documented on [`nasu_config_set`].
#[no_mangle]
pub unsafe extern "C" fn nasu_run_derive(config: *const NasuConfig, out_dir: *const c_char) -> NasuStatus {
    run_command(config, out_dir, |cfg, out| cli::cmd_derive(cfg, out))
}

/// Retrain the derived network from scratch; `resume` may be null.
///
/// # Safety
/// Pointer arguments as documented on [`nasu_config_set`].
#[no_mangle]
pub unsafe extern "C" fn nasu_run_retrain(
    config: *const NasuConfig,
    out_dir: *const c_char,
    resume: *const c_char,
) -> NasuStatus {
    let resume = match optional_path(resume) {
        Ok(r) => r,
        Err(s) => return s,
    };
    run_command(config, out_dir, |cfg, out| cli::cmd_retrain(cfg, out, resume.as_deref()))
}

/// Evaluate the configured checkpoint on the test split.
///
/// # Safety
/// Pointer arguments as documented on [`nasu_config_set`].
#[no_mangle]
pub unsafe extern "C" fn nasu_run_eval(config: *const NasuConfig, out_dir: *const c_char) -> NasuStatus {
    run_command(config, out_dir, |cfg, out| cli::cmd_eval(cfg, out))
}

/// Read the metrics.json of a completed run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated UTF-8 string; `out` must point to
/// writable memory for one [`NasuMetrics`].
#[no_mangle]
pub unsafe extern "C" fn nasu_read_metrics(run_dir: *const c_char, out: *mut NasuMetrics) -> NasuStatus {
    guard(|| {
        if out.is_null() {
            set_error("out must not be null");
            return NasuStatus::InvalidArgument;
        }
        let dir = match require_str(run_dir, "run_dir") {
            Ok(d) => PathBuf::from(d),
            Err(s) => return s,
        };
        match EvalReport::read(&dir) {
            Ok(report) => {
                *out = NasuMetrics {
                    pixel_accuracy: report.metrics.pixel_accuracy,
                    miou: report.metrics.miou,
                    dsc: report.metrics.dsc,
                    num_pixels: report.metrics.num_pixels,
                };
                NasuStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

#[cfg(test)]
mod tests;
