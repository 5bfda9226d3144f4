use std::ffi::{c_char, CStr, CString};
use std::ptr;

use cdalab_ffi::*;

fn last_error() -> String {
    let mut needed = 0usize;
    unsafe { cda_last_error(ptr::null_mut(), 0, &mut needed) };
    let mut buf = vec![0 as c_char; needed];
    assert_eq!(unsafe { cda_last_error(buf.as_mut_ptr(), buf.len(), ptr::null_mut()) }, CdaStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn set(cfg: *mut CdaConfig, k: &str, v: &str) {
    assert_eq!(unsafe { cda_config_set(cfg, cstr(k).as_ptr(), cstr(v).as_ptr()) }, CdaStatus::Ok, "{k}");
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(cda_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    assert_eq!(unsafe { cda_config_new(ptr::null_mut()) }, CdaStatus::NullPointer);
    assert!(last_error().contains("null"));
    assert_eq!(unsafe { cda_train(ptr::null()) }, CdaStatus::NullPointer);
    unsafe {
        cda_config_free(ptr::null_mut());
        cda_model_free(ptr::null_mut());
    }
}

#[test]
fn config_roundtrip_and_errors() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { cda_config_new(&mut cfg) }, CdaStatus::Ok);
    set(cfg, "train.steps", "7");
    let bad = unsafe { cda_config_set(cfg, cstr("train.nope").as_ptr(), cstr("1").as_ptr()) };
    assert_eq!(bad, CdaStatus::InvalidConfiguration);
    assert!(last_error().contains("train.nope"));

    let mut needed = 0usize;
    let mut tiny = [0 as c_char; 4];
    let st = unsafe { cda_config_to_json(cfg, tiny.as_mut_ptr(), tiny.len(), &mut needed) };
    assert_eq!(st, CdaStatus::BufferTooSmall);
    let mut buf = vec![0 as c_char; needed];
    assert_eq!(unsafe { cda_config_to_json(cfg, buf.as_mut_ptr(), buf.len(), &mut needed) }, CdaStatus::Ok);
    let json = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(v["train"]["steps"], 7);
    unsafe { cda_config_free(cfg) };

    let mut loaded = ptr::null_mut();
    let st = unsafe { cda_config_load(cstr("/nonexistent/cfg.json").as_ptr(), &mut loaded) };
    assert_eq!(st, CdaStatus::Io);
    assert!(loaded.is_null());
}

#[test]
fn generate_train_load_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { cda_config_new(&mut cfg) }, CdaStatus::Ok);
    set(cfg, "data_dir", data.to_str().unwrap());
    set(cfg, "run_dir", run.to_str().unwrap());
    set(cfg, "samples_per_domain", "40");
    set(cfg, "train.steps", "20");
    set(cfg, "train.variant", "SO");
    assert_eq!(unsafe { cda_generate(cfg) }, CdaStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { cda_train(cfg) }, CdaStatus::Ok, "{}", last_error());
    unsafe { cda_config_free(cfg) };

    let mut model = ptr::null_mut();
    let ck = cstr(run.join("checkpoint.final").to_str().unwrap());
    assert_eq!(unsafe { cda_model_load(ck.as_ptr(), &mut model) }, CdaStatus::Ok, "{}", last_error());
    let (mut dim, mut classes) = (0usize, 0usize);
    assert_eq!(unsafe { cda_model_shape(model, &mut dim, &mut classes) }, CdaStatus::Ok);
    assert_eq!((dim, classes), (2, 4));

    let x = [0.5, -1.0, 1.5, 0.25, -0.3, 2.0];
    let mut labels = [u32::MAX; 3];
    let st = unsafe { cda_model_predict(model, x.as_ptr(), 3, 2, CdaRule::Mean, labels.as_mut_ptr()) };
    assert_eq!(st, CdaStatus::Ok);
    assert!(labels.iter().all(|&l| l < 4));

    let mut probs = [0.0; 12];
    let st = unsafe { cda_model_predict_proba(model, x.as_ptr(), 3, 2, CdaRule::First, probs.as_mut_ptr(), 12) };
    assert_eq!(st, CdaStatus::Ok);
    for row in probs.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let st = unsafe { cda_model_predict_proba(model, x.as_ptr(), 3, 2, CdaRule::Mean, probs.as_mut_ptr(), 11) };
    assert_eq!(st, CdaStatus::BufferTooSmall);
    let st = unsafe { cda_model_predict(model, x.as_ptr(), 2, 3, CdaRule::Mean, labels.as_mut_ptr()) };
    assert_eq!(st, CdaStatus::InvalidArgument);
    unsafe { cda_model_free(model) };
}

#[test]
fn js_divergence_matches_closed_form() {
    let p = [1.0, 0.0];
    let q = [0.0, 1.0];
    let mut out = -1.0;
    assert_eq!(unsafe { cda_js_divergence(p.as_ptr(), q.as_ptr(), 2, &mut out) }, CdaStatus::Ok);
    assert!((out - std::f64::consts::LN_2).abs() < 1e-12);
    let bad = [0.7, 0.7];
    assert_eq!(unsafe { cda_js_divergence(bad.as_ptr(), q.as_ptr(), 2, &mut out) }, CdaStatus::InvalidArgument);
}

#[test]
fn theory_check_status() {
    assert_eq!(cda_theory_check(1, 10, 200, 1e-9), CdaStatus::Ok);
    assert_eq!(cda_theory_check(1, 10, 200, 0.0), CdaStatus::CheckFailed);
    assert!(last_error().starts_with("failed checks"));
    assert_eq!(cda_theory_check(1, 0, 200, 1e-9), CdaStatus::InvalidArgument);
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cdalab.h")).unwrap();
    for sym in [
        "CDALAB_H",
        "CDA_STATUS_OK = 0",
        "CDA_STATUS_PANIC = 10",
        "CDA_RULE_FIRST",
        "typedef struct CdaConfig CdaConfig",
        "typedef struct CdaModelHandle CdaModelHandle",
        "cda_model_predict(",
        "cda_last_error(",
        "cda_theory_check(",
    ] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}
