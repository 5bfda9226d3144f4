//! C ABI over `cdalab`.
//!
//! Every fallible call returns a `CdaStatus`. On failure the message is kept
//! in a thread-local slot readable through `cda_last_error`. Handles are
//! opaque pointers owned by the caller and released with their `_free`
//! function; passing null to a `_free` function is a no-op.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cdalab::autodiff::Mat;
use cdalab::cli::{cmd_gen, cmd_train, RunConfig};
use cdalab::error::CdaError;
use cdalab::model::{CdaModel, Checkpoint, PredictionRule};
use cdalab::theory::{js_divergence, run_theory_checks, DiscreteDist, TheoryCheckOptions};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfiguration = 3,
    ContractViolation = 4,
    NumericalDomain = 5,
    Io = 6,
    Utf8 = 7,
    BufferTooSmall = 8,
    CheckFailed = 9,
    Panic = 10,
}

/// Prediction rule for `cda_model_predict`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdaRule {
    /// Mean of both content classifiers' softmax outputs.
    Mean = 0,
    /// First content classifier only.
    First = 1,
}

/// Opaque run configuration.
pub struct CdaConfig {
    inner: RunConfig,
}

/// Opaque trained model.
pub struct CdaModelHandle {
    inner: CdaModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &CdaError) -> CdaStatus {
    match e {
        CdaError::InvalidArgument(_) | CdaError::InsufficientData(_) | CdaError::UndefinedAccuracy(_) => {
            CdaStatus::InvalidArgument
        }
        CdaError::InvalidConfiguration(_) | CdaError::Serde(_) => CdaStatus::InvalidConfiguration,
        CdaError::ContractViolation(_) | CdaError::EmptyQueue(_) => CdaStatus::ContractViolation,
        CdaError::NumericalDomain(_) => CdaStatus::NumericalDomain,
        CdaError::Io(_) => CdaStatus::Io,
    }
}

enum Failure {
    Status(CdaStatus, String),
    Lib(CdaError),
}

impl From<CdaError> for Failure {
    fn from(e: CdaError) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdaStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside cdalab");
            CdaStatus::Panic
        }
    }
}

fn null() -> Failure {
    Failure::Status(CdaStatus::NullPointer, "null pointer argument".into())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::Status(CdaStatus::Utf8, e.to_string()))
}

unsafe fn mut_ref<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(null)
}

unsafe fn const_ref<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(null)
}

/// Copies `s` plus a NUL terminator into `buf`. `needed` (optional) receives
/// the required size including the terminator.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Failure> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        return Err(Failure::Status(CdaStatus::BufferTooSmall, format!("buffer needs {n} bytes")));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf.cast(), s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf`.
#[no_mangle]
pub unsafe extern "C" fn cda_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> CdaStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(&msg, buf, cap, needed) {
        Ok(()) => CdaStatus::Ok,
        Err(Failure::Status(s, _)) => s,
        Err(Failure::Lib(e)) => status_of(&e),
    }
}

/// Creates a configuration holding the defaults.
#[no_mangle]
pub unsafe extern "C" fn cda_config_new(out: *mut *mut CdaConfig) -> CdaStatus {
    guard(|| {
        let out = mut_ref(out)?;
        *out = Box::into_raw(Box::new(CdaConfig { inner: RunConfig::default() }));
        Ok(())
    })
}

/// Loads a JSON configuration file.
#[no_mangle]
pub unsafe extern "C" fn cda_config_load(path: *const c_char, out: *mut *mut CdaConfig) -> CdaStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path)?);
        let out = mut_ref(out)?;
        *out = Box::into_raw(Box::new(CdaConfig { inner: RunConfig::load(&path)? }));
        Ok(())
    })
}

/// Sets a dotted key such as `train.steps` to a JSON (or bare string) value.
#[no_mangle]
pub unsafe extern "C" fn cda_config_set(cfg: *mut CdaConfig, key: *const c_char, value: *const c_char) -> CdaStatus {
    guard(|| {
        let cfg = mut_ref(cfg)?;
        cfg.inner.set(str_arg(key)?, str_arg(value)?)?;
        Ok(())
    })
}

/// Serializes the configuration as JSON into `buf`.
#[no_mangle]
pub unsafe extern "C" fn cda_config_to_json(
    cfg: *const CdaConfig,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> CdaStatus {
    guard(|| {
        let cfg = const_ref(cfg)?;
        write_str(&cfg.inner.to_json()?, buf, cap, needed)
    })
}

#[no_mangle]
pub unsafe extern "C" fn cda_config_free(cfg: *mut CdaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Writes the dataset directory named by the configuration.
#[no_mangle]
pub unsafe extern "C" fn cda_generate(cfg: *const CdaConfig) -> CdaStatus {
    guard(|| {
        cmd_gen(&const_ref(cfg)?.inner)?;
        Ok(())
    })
}

/// Trains on the configured dataset directory and fills the run directory.
#[no_mangle]
pub unsafe extern "C" fn cda_train(cfg: *const CdaConfig) -> CdaStatus {
    guard(|| {
        cmd_train(&const_ref(cfg)?.inner)?;
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn cda_model_load(path: *const c_char, out: *mut *mut CdaModelHandle) -> CdaStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path)?);
        let out = mut_ref(out)?;
        let inner = Checkpoint::load(&path)?.restore()?;
        *out = Box::into_raw(Box::new(CdaModelHandle { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cda_model_free(model: *mut CdaModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width and class count of a loaded model.
#[no_mangle]
pub unsafe extern "C" fn cda_model_shape(
    model: *const CdaModelHandle,
    input_dim: *mut usize,
    num_classes: *mut usize,
) -> CdaStatus {
    guard(|| {
        let m = &const_ref(model)?.inner;
        *mut_ref(input_dim)? = m.encoder.input_dim();
        *mut_ref(num_classes)? = m.adapters[0].content.output_dim();
        Ok(())
    })
}

unsafe fn input_matrix(m: &CdaModel, x: *const f64, rows: usize, cols: usize) -> Result<Mat, Failure> {
    if x.is_null() {
        return Err(null());
    }
    let want = m.encoder.input_dim();
    if cols != want || rows == 0 {
        return Err(Failure::Lib(CdaError::InvalidArgument(format!(
            "expected rows >= 1 and {want} columns, got {rows} x {cols}"
        ))));
    }
    let data = std::slice::from_raw_parts(x, rows * cols).to_vec();
    Ok(Mat::from_shape_vec((rows, cols), data).expect("length checked"))
}

fn rule_of(rule: CdaRule) -> PredictionRule {
    match rule {
        CdaRule::Mean => PredictionRule::Mean,
        CdaRule::First => PredictionRule::First,
    }
}

/// Predicts a class per row of the row-major `rows x cols` matrix `x`.
/// `labels` must hold `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn cda_model_predict(
    model: *const CdaModelHandle,
    x: *const f64,
    rows: usize,
    cols: usize,
    rule: CdaRule,
    labels: *mut u32,
) -> CdaStatus {
    guard(|| {
        let m = &const_ref(model)?.inner;
        let x = input_matrix(m, x, rows, cols)?;
        if labels.is_null() {
            return Err(null());
        }
        let out = std::slice::from_raw_parts_mut(labels, rows);
        for (o, c) in out.iter_mut().zip(m.predict(&x, rule_of(rule))) {
            *o = c as u32;
        }
        Ok(())
    })
}

/// Class probabilities, row-major `rows x num_classes`, written to `probs`
/// which must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn cda_model_predict_proba(
    model: *const CdaModelHandle,
    x: *const f64,
    rows: usize,
    cols: usize,
    rule: CdaRule,
    probs: *mut f64,
    cap: usize,
) -> CdaStatus {
    guard(|| {
        let m = &const_ref(model)?.inner;
        let x = input_matrix(m, x, rows, cols)?;
        let p = m.predict_proba(&x, rule_of(rule));
        if probs.is_null() {
            return Err(null());
        }
        if cap < p.len() {
            return Err(Failure::Status(CdaStatus::BufferTooSmall, format!("need {} doubles", p.len())));
        }
        let out = std::slice::from_raw_parts_mut(probs, p.len());
        for (o, v) in out.iter_mut().zip(p.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Jensen-Shannon divergence (natural log) of two histograms of length `n`.
/// Inputs must be nonnegative and sum to 1.
#[no_mangle]
pub unsafe extern "C" fn cda_js_divergence(p: *const f64, q: *const f64, n: usize, out: *mut f64) -> CdaStatus {
    guard(|| {
        if p.is_null() || q.is_null() {
            return Err(null());
        }
        let p = DiscreteDist::new(std::slice::from_raw_parts(p, n).to_vec())?;
        let q = DiscreteDist::new(std::slice::from_raw_parts(q, n).to_vec())?;
        *mut_ref(out)? = js_divergence(&p, &q)?;
        Ok(())
    })
}

/// Runs the divergence identity suite. Returns `CheckFailed` if any check
/// misses its tolerance.
#[no_mangle]
pub extern "C" fn cda_theory_check(seed: u64, trials: usize, resolution: usize, tol: f64) -> CdaStatus {
    guard(|| {
        let opts = TheoryCheckOptions { seed, trials, resolution, tol, bruteforce_trials: None };
        let report = run_theory_checks(&opts)?;
        if report.passed {
            Ok(())
        } else {
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            Err(Failure::Status(CdaStatus::CheckFailed, format!("failed checks: {}", failed.join(", "))))
        }
    })
}
