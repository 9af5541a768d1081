use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pmformer_core::baselines::{DlinearConfig, DlinearModel};
use pmformer_core::pmformer::{Pmformer, PmformerConfig};
use pmformer_ffi::*;

fn last_error() -> String {
    let p = pm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(pm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn features_round_trip_through_handle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.csv");
    std::fs::write(&path, "date,a,b\n2024-01-01,1.0,2.0\n2024-01-02,3.0,4.5\n").unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { pm_features_load(cstr(&path).as_ptr(), &mut h) };
    assert_eq!(st, PmStatus::Ok);
    unsafe {
        assert_eq!((pm_features_rows(h), pm_features_cols(h)), (2, 2));
        let mut buf = [0.0; 4];
        assert_eq!(pm_features_copy(h, buf.as_mut_ptr(), 4), PmStatus::Ok);
        assert_eq!(buf, [1.0, 2.0, 3.0, 4.5]);
        assert_eq!(pm_features_copy(h, buf.as_mut_ptr(), 3), PmStatus::Usage);
        pm_features_free(h);
        pm_features_free(ptr::null_mut());
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut h = ptr::null_mut();
    let missing = CString::new("/definitely/not/here.csv").unwrap();
    let st = unsafe { pm_features_load(missing.as_ptr(), &mut h) };
    assert_eq!(st, PmStatus::Data);
    assert!(last_error().contains("input not found"));
    assert!(h.is_null());
    let st = unsafe { pm_features_load(ptr::null(), &mut h) };
    assert_eq!(st, PmStatus::NullPointer);
    assert_eq!(unsafe { pm_features_rows(ptr::null()) }, 0);
}

#[test]
fn model_predictions_match_core() {
    let dir = tempfile::tempdir().unwrap();
    let config = PmformerConfig {
        num_features: 5,
        subset_size: 2,
        window: 3,
        dim: 4,
        heads: 2,
        d_ff: 8,
        layers: 1,
        dropout: 0.0,
        target_channel: 4,
    };
    let model = Pmformer::new(config, 3).unwrap();
    let path = dir.path().join("m.ckpt");
    model.to_checkpoint(&[]).save(&path).unwrap();
    let window: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();

    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(pm_model_load(cstr(&path).as_ptr(), &mut h), PmStatus::Ok);
        assert_eq!((pm_model_window(h), pm_model_channels(h)), (3, 5));
        let mut y = 0.0;
        assert_eq!(pm_model_predict(h, window.as_ptr(), 15, 4, 11, &mut y), PmStatus::Ok);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        assert_eq!(y, model.predict_target(&window, 4, &mut rng).unwrap());
        assert_eq!(pm_model_predict(h, window.as_ptr(), 14, 4, 11, &mut y), PmStatus::Usage);
        assert_eq!(pm_model_predict(h, window.as_ptr(), 15, 0, 11, &mut y), PmStatus::Usage);
        pm_model_free(h);
    }

    let dl = DlinearModel::new(DlinearConfig { channels: 5, window: 3, moving_avg: 3, individual: true, target_channel: 4 }).unwrap();
    dl.to_checkpoint(&[]).save(&path).unwrap();
    unsafe {
        assert_eq!(pm_model_load(cstr(&path).as_ptr(), &mut h), PmStatus::Ok);
        let mut y = 0.0;
        assert_eq!(pm_model_predict(h, window.as_ptr(), 15, 1, 0, &mut y), PmStatus::Ok);
        assert_eq!(y, dl.predict(&window).unwrap()[4]);
        pm_model_free(h);
    }

    std::fs::write(&path, "not a checkpoint").unwrap();
    assert_eq!(unsafe { pm_model_load(cstr(&path).as_ptr(), &mut h) }, PmStatus::Data);
}

#[test]
fn backtest_fills_report() {
    let preds = [0.01, -0.02, 0.03];
    let actual = [0.02, -0.01, -0.01];
    let mut r = PmBacktestReport::default();
    let st = unsafe { pm_backtest(preds.as_ptr(), actual.as_ptr(), 3, 0.0, &mut r) };
    assert_eq!(st, PmStatus::Ok);
    assert_eq!(r.n_days, 3);
    assert!((r.directional_accuracy_pct - 200.0 / 3.0).abs() < 1e-12);
    let bad = [f64::NAN, 0.0, 0.0];
    assert_eq!(unsafe { pm_backtest(bad.as_ptr(), actual.as_ptr(), 3, 0.0, &mut r) }, PmStatus::Data);
    assert_eq!(unsafe { pm_backtest(preds.as_ptr(), actual.as_ptr(), 0, 0.0, &mut r) }, PmStatus::Data);
}

fn target_dir() -> PathBuf {
    // CARGO_TARGET_TMPDIR is <target>/tmp; the library sits in <target>/<profile>.
    let tmp = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap().to_path_buf();
    assert!(profile_dir.starts_with(tmp.parent().unwrap()));
    profile_dir
}

#[test]
fn header_compiles_and_links_from_c() {
    let lib_dir = target_dir();
    let staticlib = lib_dir.join("libpmformer_ffi.a");
    assert!(staticlib.exists(), "{} missing", staticlib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <math.h>
#include <stdio.h>
#include "pmformer.h"
int main(void) {
    double p[3] = {0.01, -0.02, 0.03};
    double a[3] = {0.02, -0.01, -0.01};
    PmBacktestReport r;
    if (pm_backtest(p, a, 3, 0.0, &r) != PM_STATUS_OK) return 1;
    if (r.n_days != 3) return 2;
    PmFeatures *f = NULL;
    if (pm_features_load("/no/such/file.csv", &f) != PM_STATUS_DATA) return 3;
    if (pm_last_error() == NULL) return 4;
    printf("%s %.4f\n", pm_version(), r.directional_accuracy_pct);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = work.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("run C compiler");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        format!("{} 66.6667", env!("CARGO_PKG_VERSION"))
    );
}
