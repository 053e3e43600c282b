use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use needlemetrics::synth::{self, TrialScript};
use needlemetrics_ffi::*;

fn last_error() -> String {
    let p = nm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn orthogonalize_returns_unit_quaternion() {
    let m = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0001];
    let mut q = [0.0; 4];
    assert_eq!(unsafe { nm_orthogonalize(m.as_ptr(), q.as_mut_ptr()) }, NmStatus::Ok);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for (a, b) in q.iter().zip([h, 0.0, 0.0, h]) {
        assert!((a - b).abs() < 1e-9, "{q:?}");
    }
    assert!(nm_last_error().is_null());
}

#[test]
fn degenerate_matrix_reports_numerical_error() {
    let m = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    let mut q = [0.0; 4];
    assert_eq!(
        unsafe { nm_orthogonalize(m.as_ptr(), q.as_mut_ptr()) },
        NmStatus::Numerical
    );
    assert!(last_error().contains("degenerate"));
}

#[test]
fn null_pointers_are_rejected() {
    let q = [1.0, 0.0, 0.0, 0.0];
    assert_eq!(
        unsafe { nm_rotation_angle(q.as_ptr(), q.as_ptr(), ptr::null_mut()) },
        NmStatus::NullPointer
    );
    assert!(last_error().contains("out_angle"));
    assert_eq!(
        unsafe { nm_trial_load(ptr::null(), NmCondition::Teleoperated, ptr::null(), ptr::null_mut()) },
        NmStatus::NullPointer
    );
}

#[test]
fn rotation_angle_and_slerp() {
    let a = [1.0, 0.0, 0.0, 0.0];
    let half = 0.3f64;
    let b = [half.cos(), 0.0, half.sin(), 0.0];
    let mut angle = 0.0;
    assert_eq!(
        unsafe { nm_rotation_angle(a.as_ptr(), b.as_ptr(), &mut angle) },
        NmStatus::Ok
    );
    assert!((angle - 0.6).abs() < 1e-12);
    let mut mid = [0.0; 4];
    assert_eq!(
        unsafe { nm_slerp(a.as_ptr(), b.as_ptr(), 0.5, mid.as_mut_ptr()) },
        NmStatus::Ok
    );
    assert!((mid[0] - 0.15f64.cos()).abs() < 1e-12);
    assert!((mid[2] - 0.15f64.sin()).abs() < 1e-12);
}

#[test]
fn filtfilt_in_place_keeps_dc() {
    let mut x = vec![3.5; 64];
    let p = x.as_mut_ptr();
    assert_eq!(unsafe { nm_filtfilt(p, 64, 100.0, 6.0, p) }, NmStatus::Ok);
    assert!(x.iter().all(|v| (v - 3.5).abs() < 1e-9));
    assert_eq!(unsafe { nm_filtfilt(p, 5, 100.0, 6.0, p) }, NmStatus::InvalidArgument);
    assert!(last_error().contains("too short"));
}

#[test]
fn trial_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut script = TrialScript::teleoperated();
    script.noise = Default::default();
    let trial = synth::generate_trial(&script, 1, "t").unwrap();
    let path = synth::write_trial(dir.path(), "t", &trial).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();

    let mut handle: *mut NmTrial = ptr::null_mut();
    let status = unsafe { nm_trial_load(c_path.as_ptr(), NmCondition::Teleoperated, ptr::null(), &mut handle) };
    assert_eq!(status, NmStatus::Ok, "{}", last_error());
    let mut len = 0usize;
    assert_eq!(unsafe { nm_trial_len(handle, &mut len) }, NmStatus::Ok);
    assert!(len > 300);

    let mut b = NmBoundaries::default();
    assert_eq!(
        unsafe { nm_trial_segment(handle, &mut b) },
        NmStatus::Ok,
        "{}",
        last_error()
    );
    assert!((b.j1_time_s - trial.truth.true_j1_s).abs() <= 0.05);
    assert!((b.j2_time_s - trial.truth.true_j2_s).abs() <= 0.05);

    let mut m = [NmSegmentMetrics::default(); 2];
    assert_eq!(
        unsafe { nm_trial_metrics(handle, b.j1, b.j2, m.as_mut_ptr()) },
        NmStatus::Ok
    );
    assert!(m
        .iter()
        .all(|s| s.tt > 0.0 && s.p > 0.0 && s.a.is_finite() && s.c > 0.0));
    assert_eq!(
        unsafe { nm_trial_metrics(handle, b.j2, b.j1, m.as_mut_ptr()) },
        NmStatus::InvalidArgument
    );
    unsafe { nm_trial_free(handle) };
    unsafe { nm_trial_free(ptr::null_mut()) };
}

#[test]
fn missing_recording_is_io_error() {
    let p = CString::new("/nonexistent/trial.csv").unwrap();
    let mut handle: *mut NmTrial = ptr::null_mut();
    let status = unsafe { nm_trial_load(p.as_ptr(), NmCondition::Teleoperated, ptr::null(), &mut handle) };
    assert_eq!(status, NmStatus::Io);
    assert!(handle.is_null());
}

#[test]
fn anova_degrees_of_freedom() {
    let n = 15;
    let early: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
    let late: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
    let group: Vec<u8> = (0..n).map(|i| (i < 6) as u8).collect();
    let mut r = NmAnova::default();
    let s = unsafe { nm_mixed_anova(early.as_ptr(), late.as_ptr(), group.as_ptr(), n, 0.05, &mut r) };
    assert_eq!(s, NmStatus::Ok, "{}", last_error());
    for e in [r.expertise, r.trial, r.interaction] {
        assert_eq!((e.df_num, e.df_den), (1, 13));
        assert!((0.0..=1.0).contains(&e.p));
    }
}

#[test]
fn bootstrap_interval_brackets_mean() {
    let v: Vec<f64> = (0..30).map(|i| i as f64).collect();
    let (mut lo, mut hi) = (0.0, 0.0);
    assert_eq!(
        unsafe { nm_bootstrap_ci(v.as_ptr(), v.len(), 0.95, 2000, 7, &mut lo, &mut hi) },
        NmStatus::Ok
    );
    assert!(lo < 14.5 && 14.5 < hi);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(nm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/needlemetrics.h");
    assert!(header.exists());
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .status()
            .unwrap_or_else(|e| panic!("running {compiler}: {e}"));
        assert!(status.success(), "{compiler} rejected the header");
    }
}
