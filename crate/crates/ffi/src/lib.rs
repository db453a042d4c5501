//! C ABI over `earcan`.
//!
//! Every fallible call returns an [`EarcanStatus`] and writes results through
//! out-pointers. Handles are opaque and must be released with their `_free`
//! function. The message of the most recent failure on the calling thread is
//! available from [`earcan_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use earcan::embedding::Embedding;
use earcan::harness::{self, ExperimentConfig, HarnessError, RunOptions, Scenario};
use earcan::matcher;
use earcan::psycho;
use earcan::session::{Phase, Session, SessionConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarcanStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Stage = 4,
    Protocol = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarcanPhase {
    InitialLogin = 0,
    Authenticated = 1,
    Locked = 2,
}

impl From<Phase> for EarcanPhase {
    fn from(p: Phase) -> Self {
        match p {
            Phase::InitialLogin => EarcanPhase::InitialLogin,
            Phase::Authenticated => EarcanPhase::Authenticated,
            Phase::Locked => EarcanPhase::Locked,
        }
    }
}

/// Opaque experiment configuration.
pub struct EarcanConfig {
    inner: ExperimentConfig,
}

/// Opaque continuous-authentication session.
pub struct EarcanSession {
    inner: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: EarcanStatus, msg: impl ToString) -> EarcanStatus {
    let msg = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
    status
}

fn guard(f: impl FnOnce() -> EarcanStatus) -> EarcanStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(EarcanStatus::Panic, "panic inside earcan"),
    }
}

unsafe fn slice<'a>(p: *const f64, n: usize) -> Option<&'a [f64]> {
    if p.is_null() {
        return if n == 0 { Some(&[]) } else { None };
    }
    Some(std::slice::from_raw_parts(p, n))
}

unsafe fn string<'a>(p: *const c_char) -> Result<&'a str, EarcanStatus> {
    if p.is_null() {
        return Err(fail(EarcanStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(EarcanStatus::InvalidArgument, "string is not UTF-8"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn earcan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn earcan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Threshold in quiet at `freq_hz`, in dBFS.
///
/// # Safety
/// `out_dbfs` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_threshold_in_quiet(freq_hz: f64, out_dbfs: *mut f64) -> EarcanStatus {
    guard(|| {
        if out_dbfs.is_null() {
            return fail(EarcanStatus::NullPointer, "out_dbfs is null");
        }
        match psycho::threshold_in_quiet(freq_hz) {
            Ok(v) => {
                *out_dbfs = v;
                EarcanStatus::Ok
            }
            Err(e) => fail(EarcanStatus::InvalidArgument, e),
        }
    })
}

/// Equal error rate and its threshold from two score lists.
///
/// # Safety
/// `genuine` and `imposter` must point to `n_genuine` and `n_imposter`
/// readable doubles; the out-pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_eer(
    genuine: *const f64,
    n_genuine: usize,
    imposter: *const f64,
    n_imposter: usize,
    out_eer: *mut f64,
    out_threshold: *mut f64,
) -> EarcanStatus {
    guard(|| {
        let (Some(g), Some(i)) = (slice(genuine, n_genuine), slice(imposter, n_imposter)) else {
            return fail(EarcanStatus::NullPointer, "null score array");
        };
        if out_eer.is_null() || out_threshold.is_null() {
            return fail(EarcanStatus::NullPointer, "null output");
        }
        match matcher::eer(g, i) {
            Ok((e, t)) => {
                *out_eer = e;
                *out_threshold = t;
                EarcanStatus::Ok
            }
            Err(e) => fail(EarcanStatus::InvalidArgument, e),
        }
    })
}

/// Cosine score of `probe` against a template built from `template`. Both
/// vectors are normalised first.
///
/// # Safety
/// Both arrays must hold `dim` readable doubles; `out_score` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_score(template: *const f64, probe: *const f64, dim: usize, out_score: *mut f64) -> EarcanStatus {
    guard(|| {
        let (Some(t), Some(p)) = (slice(template, dim), slice(probe, dim)) else {
            return fail(EarcanStatus::NullPointer, "null vector");
        };
        if out_score.is_null() {
            return fail(EarcanStatus::NullPointer, "out_score is null");
        }
        let result = (|| -> Result<f64, Box<dyn std::error::Error>> {
            let t = matcher::make_template(&[Embedding::normalized(t.to_vec())?])?;
            Ok(matcher::score(&t, &Embedding::normalized(p.to_vec())?)?)
        })();
        match result {
            Ok(s) => {
                *out_score = s;
                EarcanStatus::Ok
            }
            Err(e) => fail(EarcanStatus::InvalidArgument, e),
        }
    })
}

/// New config holding the built-in defaults.
#[no_mangle]
pub extern "C" fn earcan_config_default() -> *mut EarcanConfig {
    Box::into_raw(Box::new(EarcanConfig { inner: ExperimentConfig::default() }))
}

/// Parses and validates a TOML config.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_config_from_toml(toml: *const c_char, out: *mut *mut EarcanConfig) -> EarcanStatus {
    guard(|| {
        if out.is_null() {
            return fail(EarcanStatus::NullPointer, "out is null");
        }
        let text = match string(toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_toml(text).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(EarcanConfig { inner: c }));
                EarcanStatus::Ok
            }
            Err(e) => fail(EarcanStatus::Config, e),
        }
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn earcan_config_set_seed(cfg: *mut EarcanConfig, seed: u64) -> EarcanStatus {
    match cfg.as_mut() {
        Some(c) => {
            c.inner.seed = seed;
            EarcanStatus::Ok
        }
        None => fail(EarcanStatus::NullPointer, "cfg is null"),
    }
}

/// SHA-256 of the canonical config, as a string to release with [`earcan_string_free`].
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_config_hash(cfg: *const EarcanConfig, out: *mut *mut c_char) -> EarcanStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return fail(EarcanStatus::NullPointer, "cfg is null");
        };
        if out.is_null() {
            return fail(EarcanStatus::NullPointer, "out is null");
        }
        *out = CString::new(c.inner.hash()).expect("hex has no NUL").into_raw();
        EarcanStatus::Ok
    })
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn earcan_config_free(cfg: *mut EarcanConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the full experiment and returns the metrics report as JSON.
/// `out_dir` may be NULL to keep artifacts in memory; `with_sessions`
/// enables the session scenarios.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` NULL or a NUL-terminated path,
/// `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_run_experiment(
    cfg: *const EarcanConfig,
    out_dir: *const c_char,
    with_sessions: bool,
    out_json: *mut *mut c_char,
) -> EarcanStatus {
    guard(|| {
        let Some(c) = cfg.as_ref() else {
            return fail(EarcanStatus::NullPointer, "cfg is null");
        };
        if out_json.is_null() {
            return fail(EarcanStatus::NullPointer, "out_json is null");
        }
        let dir = if out_dir.is_null() {
            None
        } else {
            match string(out_dir) {
                Ok(d) => Some(d.into()),
                Err(s) => return s,
            }
        };
        let opts = RunOptions {
            out_dir: dir,
            scenarios: if with_sessions { Scenario::ALL.to_vec() } else { Vec::new() },
            net: None,
        };
        match harness::run_with(&c.inner, &opts) {
            Ok(r) => {
                *out_json = CString::new(r.to_json()).expect("JSON has no NUL").into_raw();
                EarcanStatus::Ok
            }
            Err(e @ HarnessError::Config(_)) => fail(EarcanStatus::Config, e),
            Err(e) => fail(EarcanStatus::Stage, e),
        }
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn earcan_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Starts a session in the login phase. Thresholds, `k_fail` and the template
/// vector are required; the other settings keep their defaults.
///
/// # Safety
/// `template` must hold `dim` readable doubles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_session_new(
    theta_accept: f64,
    theta_update: f64,
    k_fail: u32,
    template: *const f64,
    dim: usize,
    out: *mut *mut EarcanSession,
) -> EarcanStatus {
    guard(|| {
        let Some(t) = slice(template, dim) else {
            return fail(EarcanStatus::NullPointer, "template is null");
        };
        if out.is_null() {
            return fail(EarcanStatus::NullPointer, "out is null");
        }
        let config = SessionConfig { theta_accept, theta_update, k_fail, ..SessionConfig::default() };
        let template = match Embedding::normalized(t.to_vec()) {
            Ok(e) => matcher::make_template(&[e]).expect("one unit vector"),
            Err(e) => return fail(EarcanStatus::InvalidArgument, e),
        };
        match Session::new(config, template) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(EarcanSession { inner: s }));
                EarcanStatus::Ok
            }
            Err(e) => fail(EarcanStatus::Config, e),
        }
    })
}

unsafe fn step(
    s: *mut EarcanSession,
    out_phase: *mut EarcanPhase,
    f: impl FnOnce(&mut Session) -> Result<Phase, earcan::session::SessionError>,
) -> EarcanStatus {
    guard(|| {
        let Some(s) = s.as_mut() else {
            return fail(EarcanStatus::NullPointer, "session is null");
        };
        match f(&mut s.inner) {
            Ok(p) => {
                if !out_phase.is_null() {
                    *out_phase = p.into();
                }
                EarcanStatus::Ok
            }
            Err(e) => fail(EarcanStatus::Protocol, e),
        }
    })
}

/// Strict login with an already computed score.
///
/// # Safety
/// `s` must be a live handle; `out_phase` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_session_login(s: *mut EarcanSession, now_ms: u64, score: f64, out_phase: *mut EarcanPhase) -> EarcanStatus {
    step(s, out_phase, |x| x.initial_login(now_ms, score))
}

/// One continuous-authentication window.
///
/// # Safety
/// `s` must be a live handle; `out_phase` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_session_window(s: *mut EarcanSession, now_ms: u64, score: f64, out_phase: *mut EarcanPhase) -> EarcanStatus {
    step(s, out_phase, |x| x.window_step(now_ms, score))
}

/// Re-login after a lock.
///
/// # Safety
/// `s` must be a live handle; `out_phase` NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_session_relogin(s: *mut EarcanSession, now_ms: u64, score: f64, out_phase: *mut EarcanPhase) -> EarcanStatus {
    step(s, out_phase, |x| x.relogin(now_ms, score))
}

/// Audit log as JSON lines, released with [`earcan_string_free`].
///
/// # Safety
/// `s` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn earcan_session_trace(s: *const EarcanSession, out: *mut *mut c_char) -> EarcanStatus {
    guard(|| {
        let Some(s) = s.as_ref() else {
            return fail(EarcanStatus::NullPointer, "session is null");
        };
        if out.is_null() {
            return fail(EarcanStatus::NullPointer, "out is null");
        }
        *out = CString::new(s.inner.trace_jsonl()).expect("JSON has no NUL").into_raw();
        EarcanStatus::Ok
    })
}

/// # Safety
/// `s` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn earcan_session_free(s: *mut EarcanSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}
