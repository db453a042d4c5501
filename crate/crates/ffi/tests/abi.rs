use std::ffi::{CStr, CString};
use std::ptr;

use earcan_ffi::*;

fn last_error() -> String {
    let p = earcan_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(earcan_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        assert_eq!(earcan_threshold_in_quiet(1000.0, ptr::null_mut()), EarcanStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut e = 0.0;
        let mut t = 0.0;
        assert_eq!(earcan_eer(ptr::null(), 3, ptr::null(), 3, &mut e, &mut t), EarcanStatus::NullPointer);
        assert_eq!(earcan_config_set_seed(ptr::null_mut(), 1), EarcanStatus::NullPointer);
        assert_eq!(earcan_session_window(ptr::null_mut(), 0, 1.0, ptr::null_mut()), EarcanStatus::NullPointer);
        earcan_config_free(ptr::null_mut());
        earcan_session_free(ptr::null_mut());
        earcan_string_free(ptr::null_mut());
    }
}

#[test]
fn threshold_in_quiet_matches_core() {
    let mut v = f64::NAN;
    assert_eq!(unsafe { earcan_threshold_in_quiet(1000.0, &mut v) }, EarcanStatus::Ok);
    assert_eq!(v, earcan::psycho::threshold_in_quiet(1000.0).unwrap());
    assert_eq!(unsafe { earcan_threshold_in_quiet(-5.0, &mut v) }, EarcanStatus::InvalidArgument);
}

#[test]
fn eer_of_separated_scores_is_zero() {
    let g = [0.9, 0.8, 0.95];
    let i = [0.1, 0.2, 0.3, 0.0];
    let (mut e, mut t) = (f64::NAN, f64::NAN);
    let st = unsafe { earcan_eer(g.as_ptr(), g.len(), i.as_ptr(), i.len(), &mut e, &mut t) };
    assert_eq!(st, EarcanStatus::Ok);
    assert_eq!(e, 0.0);
    assert!(t > 0.3 && t <= 0.8, "threshold {t}");
    let st = unsafe { earcan_eer(g.as_ptr(), 0, i.as_ptr(), i.len(), &mut e, &mut t) };
    assert_eq!(st, EarcanStatus::InvalidArgument);
}

#[test]
fn score_is_cosine() {
    let a = [3.0, 4.0];
    let b = [4.0, 3.0];
    let mut s = f64::NAN;
    assert_eq!(unsafe { earcan_score(a.as_ptr(), b.as_ptr(), 2, &mut s) }, EarcanStatus::Ok);
    assert!((s - 24.0 / 25.0).abs() < 1e-12);
    let z = [0.0, 0.0];
    assert_eq!(unsafe { earcan_score(z.as_ptr(), b.as_ptr(), 2, &mut s) }, EarcanStatus::InvalidArgument);
}

#[test]
fn config_round_trip_and_errors() {
    unsafe {
        let cfg = earcan_config_default();
        let mut h1 = ptr::null_mut();
        assert_eq!(earcan_config_hash(cfg, &mut h1), EarcanStatus::Ok);
        assert_eq!(earcan_config_set_seed(cfg, 99), EarcanStatus::Ok);
        let mut h2 = ptr::null_mut();
        assert_eq!(earcan_config_hash(cfg, &mut h2), EarcanStatus::Ok);
        let (s1, s2) = (CStr::from_ptr(h1).to_str().unwrap(), CStr::from_ptr(h2).to_str().unwrap());
        assert_eq!(s1.len(), 64);
        assert_ne!(s1, s2);
        assert_eq!(s1, earcan::harness::ExperimentConfig::default().hash());
        earcan_string_free(h1);
        earcan_string_free(h2);
        earcan_config_free(cfg);

        let mut out = ptr::null_mut();
        let ok = CString::new("seed = 5\n").unwrap();
        assert_eq!(earcan_config_from_toml(ok.as_ptr(), &mut out), EarcanStatus::Ok);
        assert!(!out.is_null());
        earcan_config_free(out);

        let mut out = ptr::null_mut();
        let bad = CString::new("no_such_key = 1\n").unwrap();
        assert_eq!(earcan_config_from_toml(bad.as_ptr(), &mut out), EarcanStatus::Config);
        assert!(out.is_null());
        assert!(last_error().contains("no_such_key"));
    }
}

#[test]
fn session_locks_and_relogs() {
    unsafe {
        let t = [1.0, 0.0, 0.0];
        let mut s = ptr::null_mut();
        assert_eq!(earcan_session_new(0.5, 0.7, 2, t.as_ptr(), 3, &mut s), EarcanStatus::Ok);
        let mut p = EarcanPhase::Locked;

        assert_eq!(earcan_session_window(s, 0, 0.9, &mut p), EarcanStatus::Protocol);
        assert_eq!(earcan_session_login(s, 0, 0.6, &mut p), EarcanStatus::Ok);
        assert_eq!(p, EarcanPhase::InitialLogin);
        assert_eq!(earcan_session_login(s, 1000, 0.8, &mut p), EarcanStatus::Ok);
        assert_eq!(p, EarcanPhase::Authenticated);
        assert_eq!(earcan_session_window(s, 4000, 0.4, &mut p), EarcanStatus::Ok);
        assert_eq!(p, EarcanPhase::Authenticated);
        assert_eq!(earcan_session_window(s, 7000, 0.4, &mut p), EarcanStatus::Ok);
        assert_eq!(p, EarcanPhase::Locked);
        assert_eq!(earcan_session_window(s, 10000, 0.9, &mut p), EarcanStatus::Protocol);
        assert_eq!(earcan_session_relogin(s, 11000, 0.69, &mut p), EarcanStatus::Ok);
        assert_eq!(p, EarcanPhase::Locked);
        assert_eq!(earcan_session_relogin(s, 12000, 0.7, &mut p), EarcanStatus::Ok);
        assert_eq!(p, EarcanPhase::Authenticated);

        let mut trace = ptr::null_mut();
        assert_eq!(earcan_session_trace(s, &mut trace), EarcanStatus::Ok);
        let text = CStr::from_ptr(trace).to_str().unwrap().to_owned();
        earcan_string_free(trace);
        earcan_session_free(s);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines.iter().all(|l| l.starts_with('{') && l.ends_with('}')));
    }
}

#[test]
fn session_rejects_bad_input() {
    unsafe {
        let mut s = ptr::null_mut();
        let z = [0.0, 0.0];
        assert_eq!(earcan_session_new(0.5, 0.7, 2, z.as_ptr(), 2, &mut s), EarcanStatus::InvalidArgument);
        let t = [1.0, 0.0];
        assert_eq!(earcan_session_new(0.8, 0.5, 2, t.as_ptr(), 2, &mut s), EarcanStatus::Config);
        assert_eq!(earcan_session_new(0.5, 0.7, 0, t.as_ptr(), 2, &mut s), EarcanStatus::Config);
        assert!(s.is_null());
    }
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/earcan.h")).unwrap();
    assert!(h.contains("#ifndef EARCAN_H"));
    for name in [
        "earcan_version",
        "earcan_last_error",
        "earcan_eer",
        "earcan_score",
        "earcan_config_from_toml",
        "earcan_run_experiment",
        "earcan_session_new",
        "earcan_session_window",
        "earcan_session_free",
        "EARCAN_STATUS_PROTOCOL",
        "typedef struct EarcanSession EarcanSession",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}
