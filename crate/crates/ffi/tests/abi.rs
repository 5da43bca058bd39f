use std::ffi::{CStr, CString};
use std::ptr;

use saf_ffi::*;

fn last_error() -> String {
    let p = saf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn set(cfg: *mut SafConfig, key: &str, value: &str) -> SafStatus {
    let (k, v) = (CString::new(key).unwrap(), CString::new(value).unwrap());
    unsafe { saf_config_set(cfg, k.as_ptr(), v.as_ptr()) }
}

#[test]
fn train_through_handles() {
    let name = CString::new("saf").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { saf_config_new(name.as_ptr(), &mut cfg) },
        SafStatus::Ok
    );
    for (k, v) in [
        ("epochs", "3"),
        ("hidden", "8"),
        ("train_per_class", "40"),
        ("test_per_class", "10"),
        ("batch_size", "16"),
        ("lag", "1"),
        ("e_start", "1"),
    ] {
        assert_eq!(set(cfg, k, v), SafStatus::Ok, "{k}");
    }

    let mut run = ptr::null_mut();
    assert_eq!(unsafe { saf_run(cfg, &mut run) }, SafStatus::Ok);
    assert_eq!(unsafe { saf_run_epochs(run) }, 3);

    let mut row = SafMetricsRow::default();
    assert_eq!(unsafe { saf_run_metrics(run, 2, &mut row) }, SafStatus::Ok);
    assert_eq!(row.epoch, 3);
    assert!(row.train_loss.is_finite() && row.trajectory_loss > 0.0);
    assert_eq!(
        unsafe { saf_run_metrics(run, 3, &mut row) },
        SafStatus::OutOfRange
    );

    let mut len = 0usize;
    assert_eq!(
        unsafe { saf_run_weights(run, ptr::null_mut(), 0, &mut len) },
        SafStatus::Ok
    );
    assert_eq!(len, 2 * 8 + 8 + 8 * 2 + 2);
    let mut short = vec![0.0; len - 1];
    assert_eq!(
        unsafe { saf_run_weights(run, short.as_mut_ptr(), short.len(), &mut len) },
        SafStatus::OutOfRange
    );
    let mut weights = vec![0.0; len];
    assert_eq!(
        unsafe { saf_run_weights(run, weights.as_mut_ptr(), weights.len(), &mut len) },
        SafStatus::Ok
    );
    assert!(weights.iter().any(|&w| w != 0.0));

    unsafe {
        saf_run_free(run);
        saf_config_free(cfg);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let mut cfg = ptr::null_mut();
    let bogus = CString::new("adam").unwrap();
    assert_ne!(
        unsafe { saf_config_new(bogus.as_ptr(), &mut cfg) },
        SafStatus::Ok
    );
    assert!(cfg.is_null());

    let name = CString::new("mesa").unwrap();
    assert_eq!(
        unsafe { saf_config_new(name.as_ptr(), &mut cfg) },
        SafStatus::Ok
    );
    assert_eq!(set(cfg, "lambda", "-1"), SafStatus::Config);
    assert!(last_error().contains("lambda"));
    assert_eq!(set(cfg, "no_such_key", "1"), SafStatus::Config);
    assert!(last_error().contains("no_such_key"));
    unsafe { saf_config_free(cfg) };

    assert_eq!(
        unsafe { saf_config_new(ptr::null(), &mut cfg) },
        SafStatus::NullArgument
    );
    let missing = CString::new("/nonexistent/run.conf").unwrap();
    assert_eq!(
        unsafe { saf_config_load(missing.as_ptr(), &mut cfg) },
        SafStatus::Io
    );
    assert!(last_error().contains("/nonexistent/run.conf"));
    assert_eq!(
        unsafe { saf_run(ptr::null(), &mut ptr::null_mut()) },
        SafStatus::NullArgument
    );
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(&path, "optimizer = sam\nrho = 0.1\nepochs = 2\n").unwrap();
    let p = CString::new(path.to_str().unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { saf_config_load(p.as_ptr(), &mut cfg) },
        SafStatus::Ok
    );
    unsafe { saf_config_free(cfg) };
}

#[test]
fn scalar_helpers() {
    assert_eq!(saf_memory_model_bytes(1_281_167, 1000, 3), 15_374_004_000);
    let mut lr = 0.0;
    assert_eq!(
        unsafe { saf_cosine_lr(0.1, 0, 100, &mut lr) },
        SafStatus::Ok
    );
    assert_eq!(lr, 0.1);
    assert_eq!(
        unsafe { saf_cosine_lr(0.1, 50, 100, &mut lr) },
        SafStatus::Ok
    );
    assert!((lr - 0.05).abs() < 1e-15);
    assert_eq!(
        unsafe { saf_cosine_lr(0.1, 101, 100, &mut lr) },
        SafStatus::Contract
    );
    assert_eq!(
        unsafe { saf_cosine_lr(0.1, 1, 100, ptr::null_mut()) },
        SafStatus::NullArgument
    );
}
