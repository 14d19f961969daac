//! C ABI over the `fedsched` simulator.
//!
//! Every function returns an [`FsStatus`]; on failure the message is kept
//! per thread and read with [`fs_last_error_message`]. Configs and runs are
//! opaque heap handles released with their matching `_free` function.
//! Panics never cross the boundary; they surface as `FS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use fedsched::analysis::{self, BoundParams};
use fedsched::cli::{self, ConfigFile};
use fedsched::metrics::MetricsWriter;
use fedsched::schedulers::{self, ClipBounds, GlobalLrState};
use fedsched::vecmath::ParamVector;
use fedsched::{Error, MetricsRecord};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    ConfigParse = 4,
    Diverged = 5,
    Io = 6,
    Panic = 7,
}

/// Parsed run configuration.
pub struct FsConfig {
    inner: ConfigFile,
}

/// Metrics of a finished or diverged run.
pub struct FsRun {
    records: Vec<MetricsRecord>,
}

/// One metrics row. Accuracy fields are NaN for the quadratic model.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsMetricsRow {
    pub round: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub alpha: f64,
    pub beta_mean: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub wall_ms: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsBoundParams {
    pub gamma_alpha: f64,
    pub gamma_beta: f64,
    pub sigma_sq: f64,
    pub rho_sq: f64,
    pub clients: u64,
    pub local_steps: u64,
    pub rounds: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FsStatus {
    match e {
        Error::InvalidConfig(_) => FsStatus::InvalidConfig,
        Error::ConfigParse { .. } => FsStatus::ConfigParse,
        Error::Diverged { .. } => FsStatus::Diverged,
        Error::Io(_) | Error::Format(_) => FsStatus::Io,
        _ => FsStatus::InvalidArgument,
    }
}

fn fail(status: FsStatus, msg: impl Into<String>) -> FsStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> FsStatus) -> FsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            fail(FsStatus::Panic, msg)
        }
    }
}

fn lift<T>(r: fedsched::Result<T>, ok: impl FnOnce(T)) -> FsStatus {
    match r {
        Ok(v) => {
            ok(v);
            FsStatus::Ok
        }
        Err(e) => fail(status_of(&e), e.to_string()),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, FsStatus> {
    if p.is_null() {
        return Err(fail(FsStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FsStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn vec_arg(p: *const f64, len: usize) -> Result<ParamVector, FsStatus> {
    if len == 0 {
        return Ok(ParamVector::zeros(0));
    }
    if p.is_null() {
        return Err(fail(FsStatus::NullPointer, "null vector"));
    }
    Ok(ParamVector::new(slice::from_raw_parts(p, len).to_vec()))
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next `fs_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses config text (the `key = value` file format) into `*out`.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_config_parse(text: *const c_char, out: *mut *mut FsConfig) -> FsStatus {
    guard(|| {
        if out.is_null() {
            return fail(FsStatus::NullPointer, "null output pointer");
        }
        let text = try_ffi!(str_arg(text));
        let parsed = cli::parse_config(text).and_then(|c| c.experiment.validate().map(|_| c));
        lift(parsed, |inner| *out = Box::into_raw(Box::new(FsConfig { inner })))
    })
}

/// # Safety
/// `config` must come from `fs_config_parse` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_config_free(config: *mut FsConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_config_set_seed(config: *mut FsConfig, seed: u64) -> FsStatus {
    guard(|| match config.as_mut() {
        Some(c) => {
            c.inner.experiment.seed = seed;
            FsStatus::Ok
        }
        None => fail(FsStatus::NullPointer, "null config"),
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_config_set_workers(config: *mut FsConfig, workers: usize) -> FsStatus {
    guard(|| match config.as_mut() {
        Some(c) if workers >= 1 => {
            c.inner.experiment.workers = workers;
            FsStatus::Ok
        }
        Some(_) => fail(FsStatus::InvalidArgument, "workers must be >= 1"),
        None => fail(FsStatus::NullPointer, "null config"),
    })
}

/// Runs the experiment. On `FS_STATUS_DIVERGED` a handle holding the rows
/// completed before the failure is still written to `*out`.
///
/// # Safety
/// `config` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_run(config: *const FsConfig, out: *mut *mut FsRun) -> FsStatus {
    guard(|| {
        let Some(config) = config.as_ref() else {
            return fail(FsStatus::NullPointer, "null config");
        };
        if out.is_null() {
            return fail(FsStatus::NullPointer, "null output pointer");
        }
        let mut records = Vec::new();
        let result = fedsched::engine::run_experiment_with(&config.inner.experiment, |r| {
            records.push(r.clone());
            Ok(())
        });
        let status = lift(result, |_| {});
        if matches!(status, FsStatus::Ok | FsStatus::Diverged) {
            *out = Box::into_raw(Box::new(FsRun { records }));
        }
        status
    })
}

/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn fs_run_len(run: *const FsRun) -> usize {
    run.as_ref().map_or(0, |r| r.records.len())
}

/// # Safety
/// `run` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_run_row(run: *const FsRun, index: usize, out: *mut FsMetricsRow) -> FsStatus {
    guard(|| {
        let (Some(run), Some(out)) = (run.as_ref(), out.as_mut()) else {
            return fail(FsStatus::NullPointer, "null run or output pointer");
        };
        let Some(r) = run.records.get(index) else {
            return fail(
                FsStatus::InvalidArgument,
                format!("row {index} out of range ({} rows)", run.records.len()),
            );
        };
        *out = FsMetricsRow {
            round: r.round as u64,
            train_loss: r.train_loss,
            train_accuracy: r.train_accuracy.unwrap_or(f64::NAN),
            test_loss: r.test_loss,
            test_accuracy: r.test_accuracy.unwrap_or(f64::NAN),
            alpha: r.alpha,
            beta_mean: r.beta_mean,
            beta_min: r.beta_min,
            beta_max: r.beta_max,
            wall_ms: r.wall_ms,
        };
        FsStatus::Ok
    })
}

/// Writes the metrics file format to `path`.
///
/// # Safety
/// `run` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fs_run_write_csv(run: *const FsRun, path: *const c_char) -> FsStatus {
    guard(|| {
        let Some(run) = run.as_ref() else {
            return fail(FsStatus::NullPointer, "null run");
        };
        let path = try_ffi!(str_arg(path));
        let write = || -> fedsched::Result<()> {
            let file = std::io::BufWriter::new(std::fs::File::create(Path::new(path))?);
            let mut w = MetricsWriter::new(file)?;
            run.records.iter().try_for_each(|r| w.write(r))
        };
        lift(write(), |_| {})
    })
}

/// # Safety
/// `run` must come from `fs_run` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_run_free(run: *mut FsRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Evaluates `P`, `Q` and the bound. Any output pointer may be null.
///
/// # Safety
/// `params` must be readable; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn fs_bound(
    params: *const FsBoundParams,
    out_p: *mut f64,
    out_q: *mut f64,
    out_bound: *mut f64,
) -> FsStatus {
    guard(|| {
        let Some(p) = params.as_ref() else {
            return fail(FsStatus::NullPointer, "null params");
        };
        let built = BoundParams::new(
            p.gamma_alpha,
            p.gamma_beta,
            p.sigma_sq,
            p.rho_sq,
            p.clients as usize,
            p.local_steps as usize,
            p.rounds as usize,
        );
        lift(built, |b| {
            if let Some(o) = out_p.as_mut() {
                *o = analysis::bound_p(&b);
            }
            if let Some(o) = out_q.as_mut() {
                *o = analysis::bound_q(&b);
            }
            if let Some(o) = out_bound.as_mut() {
                *o = analysis::bound_value(&b);
            }
        })
    })
}

/// One global hypergradient step on `alpha`. `prev` may be null on the
/// first round, in which case `alpha` is returned unchanged.
///
/// # Safety
/// `delta` (and `prev` when non-null) must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_fedhyper_g_step(
    alpha: f64,
    delta: *const f64,
    prev: *const f64,
    len: usize,
    gamma_alpha: f64,
    out_alpha: *mut f64,
) -> FsStatus {
    guard(|| {
        if out_alpha.is_null() {
            return fail(FsStatus::NullPointer, "null output pointer");
        }
        let delta = try_ffi!(vec_arg(delta, len));
        let prev = if prev.is_null() {
            None
        } else {
            Some(try_ffi!(vec_arg(prev, len)))
        };
        let bounds = ClipBounds {
            gamma_alpha,
            ..ClipBounds::default()
        };
        let state = GlobalLrState {
            prev_global_update: prev,
            ..GlobalLrState::new(alpha)
        };
        let r = bounds
            .validate()
            .and_then(|_| schedulers::fedhyper_g_step(&state, &delta, &bounds));
        lift(r, |s| *out_alpha = s.alpha)
    })
}

/// FedExp rate from `m` row-major local updates of length `dim`.
///
/// # Safety
/// `updates` must hold `m * dim` doubles and `delta` `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_fedexp_step(
    updates: *const f64,
    m: usize,
    dim: usize,
    delta: *const f64,
    epsilon: f64,
    out_alpha: *mut f64,
) -> FsStatus {
    guard(|| {
        if out_alpha.is_null() {
            return fail(FsStatus::NullPointer, "null output pointer");
        }
        let flat = try_ffi!(vec_arg(updates, m * dim)).into_vec();
        let delta = try_ffi!(vec_arg(delta, dim));
        let locals: Vec<ParamVector> = if dim == 0 {
            vec![ParamVector::zeros(0); m]
        } else {
            flat.chunks(dim).map(|c| ParamVector::new(c.to_vec())).collect()
        };
        lift(schedulers::fedexp_step(&locals, &delta, epsilon), |a| *out_alpha = a)
    })
}
