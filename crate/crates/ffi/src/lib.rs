//! C ABI for needlemetrics.
//!
//! Every function returns an [`NmStatus`]; on failure the message is
//! available from [`nm_last_error`] on the same thread until the next call.
//! Trials and calibrations are opaque handles released with their `_free`
//! function. Array arguments are caller-owned; lengths are element counts.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use needlemetrics::ingest::{
    self, CalibrationModel, Condition, Expertise, ManifestEntry, PreprocessConfig, Trial, TrialMeta,
};
use needlemetrics::metrics::{self, Segment};
use needlemetrics::rotations::{self, UnitQuaternion};
use needlemetrics::segmentation::{self, BoundarySource, SegmentBoundaries, SegmentationParams};
use needlemetrics::stats::{self, ParticipantCells};
use needlemetrics::{dsp, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Numerical = 5,
    SegmentationFailed = 6,
    UndefinedMetric = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmCondition {
    Teleoperated = 0,
    Open = 1,
}

/// Opaque preprocessed trial.
pub struct NmTrial(Trial);

/// Opaque fitted tracker calibration.
pub struct NmCalibration(CalibrationModel);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmBoundaries {
    pub j1: usize,
    pub j2: usize,
    pub j1_time_s: f64,
    pub j2_time_s: f64,
}

/// Metrics of one segment; `a` is NaN when the path length is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmSegmentMetrics {
    pub tt: f64,
    pub p: f64,
    pub a: f64,
    pub c: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmEffect {
    pub f: f64,
    pub p: f64,
    pub df_num: u32,
    pub df_den: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmAnova {
    pub expertise: NmEffect,
    pub trial: NmEffect,
    pub interaction: NmEffect,
    /// Experienced minus novice, averaged over windows.
    pub exp_minus_nov: f64,
    /// Late minus early, averaged over groups.
    pub late_minus_early: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NmStatus {
    match e {
        Error::Io { .. } | Error::MissingArtifact { .. } => NmStatus::Io,
        Error::Schema { .. } | Error::Row { .. } | Error::Empty { .. } | Error::Csv(_) | Error::Json(_) => {
            NmStatus::Parse
        }
        Error::DegenerateFrame { .. } | Error::IllConditioned(_) | Error::Stats(_) | Error::TransformInfeasible(_) => {
            NmStatus::Numerical
        }
        Error::Segmentation(_) => NmStatus::SegmentationFailed,
        Error::UndefinedMetric(_) => NmStatus::UndefinedMetric,
        _ => NmStatus::InvalidArgument,
    }
}

struct Fail(NmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(NmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NmStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn quaternion(p: *const f64, what: &str) -> Result<UnitQuaternion, Fail> {
    let c = slice(p, 4, what)?;
    UnitQuaternion::new([c[0], c[1], c[2], c[3]])
        .ok_or_else(|| Fail(NmStatus::InvalidArgument, format!("{what} is zero or not finite")))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn nm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Nearest rotation to a row-major 3×3 matrix, as a canonical unit
/// quaternion `[w, x, y, z]`.
///
/// # Safety
/// `matrix` must point to 9 doubles and `out_q` to 4.
#[no_mangle]
pub unsafe extern "C" fn nm_orthogonalize(matrix: *const f64, out_q: *mut f64) -> NmStatus {
    guard(|| {
        let m = slice(matrix, 9, "matrix")?;
        if out_q.is_null() {
            return Err(null("out_q"));
        }
        let mat = [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]];
        let q = rotations::to_quaternion(&rotations::orthogonalize(&mat)?);
        std::slice::from_raw_parts_mut(out_q, 4).copy_from_slice(&q.components());
        Ok(())
    })
}

/// Angle in radians of the rotation taking `a` to `b`.
///
/// # Safety
/// `a` and `b` must point to 4 doubles; `out_angle` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nm_rotation_angle(a: *const f64, b: *const f64, out_angle: *mut f64) -> NmStatus {
    guard(|| {
        let (qa, qb) = (quaternion(a, "a")?, quaternion(b, "b")?);
        *out(out_angle, "out_angle")? = rotations::rotation_angle(&qa, &qb);
        Ok(())
    })
}

/// Spherical interpolation between `a` (u = 0) and `b` (u = 1).
///
/// # Safety
/// `a`, `b` and `out_q` must point to 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn nm_slerp(a: *const f64, b: *const f64, u: f64, out_q: *mut f64) -> NmStatus {
    guard(|| {
        let (qa, qb) = (quaternion(a, "a")?, quaternion(b, "b")?);
        if out_q.is_null() {
            return Err(null("out_q"));
        }
        let q = rotations::slerp(&qa, &qb, u);
        std::slice::from_raw_parts_mut(out_q, 4).copy_from_slice(&q.components());
        Ok(())
    })
}

/// Zero-phase 2nd-order Butterworth low-pass of `n` uniformly sampled values.
///
/// # Safety
/// `values` and `out_values` must each point to `n` doubles; they may alias.
#[no_mangle]
pub unsafe extern "C" fn nm_filtfilt(
    values: *const f64,
    n: usize,
    rate: f64,
    cutoff: f64,
    out_values: *mut f64,
) -> NmStatus {
    guard(|| {
        let x = slice(values, n, "values")?.to_vec();
        if out_values.is_null() {
            return Err(null("out_values"));
        }
        let y = dsp::filtfilt_butter2(&x, rate, cutoff)?;
        std::slice::from_raw_parts_mut(out_values, n).copy_from_slice(&y);
        Ok(())
    })
}

/// Fits tracker lever arms from a calibration recording CSV.
///
/// # Safety
/// `recording_path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nm_calibration_fit(
    recording_path: *const c_char,
    out_cal: *mut *mut NmCalibration,
) -> NmStatus {
    guard(|| {
        let slot = out(out_cal, "out")?;
        let rec = ingest::load_calibration(&path(recording_path, "recording_path")?)?;
        let model = ingest::calibrate_endpoint(&rec)?;
        *slot = Box::into_raw(Box::new(NmCalibration(model)));
        Ok(())
    })
}

/// # Safety
/// `cal` must come from [`nm_calibration_fit`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nm_calibration_free(cal: *mut NmCalibration) {
    if !cal.is_null() {
        drop(Box::from_raw(cal));
    }
}

/// Loads and preprocesses a recording onto the default 100 Hz grid.
/// Open recordings need a calibration; it is ignored for teleoperated ones.
///
/// # Safety
/// `recording_path` must be a NUL-terminated string; `cal` may be NULL;
/// `out_trial` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nm_trial_load(
    recording_path: *const c_char,
    condition: NmCondition,
    cal: *const NmCalibration,
    out_trial: *mut *mut NmTrial,
) -> NmStatus {
    guard(|| {
        let slot = out(out_trial, "out_trial")?;
        let path = path(recording_path, "recording_path")?;
        let condition = match condition {
            NmCondition::Teleoperated => Condition::Teleoperated,
            NmCondition::Open => Condition::Open,
        };
        let entry = ManifestEntry {
            meta: TrialMeta {
                trial_id: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                participant_id: String::new(),
                expertise: Expertise::Novice,
                condition,
                trial_number: 1,
                excluded: false,
                exclusion_reason: None,
            },
            path,
        };
        let calib = cal.as_ref().map(|c| &c.0);
        let trial = ingest::ingest_trial(&entry, &PreprocessConfig::default(), calib)?;
        *slot = Box::into_raw(Box::new(NmTrial(trial)));
        Ok(())
    })
}

/// # Safety
/// `trial` must come from [`nm_trial_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nm_trial_free(trial: *mut NmTrial) {
    if !trial.is_null() {
        drop(Box::from_raw(trial));
    }
}

/// Number of preprocessed samples.
///
/// # Safety
/// `trial` must be a live handle and `out_len` valid.
#[no_mangle]
pub unsafe extern "C" fn nm_trial_len(trial: *const NmTrial, out_len: *mut usize) -> NmStatus {
    guard(|| {
        let t = trial.as_ref().ok_or_else(|| null("trial"))?;
        *out(out_len, "out_len")? = t.0.samples.len();
        Ok(())
    })
}

/// Automatic segment boundaries with default parameters.
///
/// # Safety
/// `trial` must be a live handle and `out_b` valid.
#[no_mangle]
pub unsafe extern "C" fn nm_trial_segment(trial: *const NmTrial, out_b: *mut NmBoundaries) -> NmStatus {
    guard(|| {
        let t = &trial.as_ref().ok_or_else(|| null("trial"))?.0;
        let slot = out(out_b, "out_b")?;
        let rate = PreprocessConfig::default().rate;
        let b = segmentation::segment_trial(t, &SegmentationParams::default(), rate).map_err(Error::from)?;
        *slot = NmBoundaries {
            j1: b.j1,
            j2: b.j2,
            j1_time_s: t.samples[b.j1].t,
            j2_time_s: t.samples[b.j2].t,
        };
        Ok(())
    })
}

/// Metrics of segments I and II for boundaries `j1 < j2` (sample indices).
///
/// # Safety
/// `trial` must be a live handle and `out_metrics` must point to 2 structs.
#[no_mangle]
pub unsafe extern "C" fn nm_trial_metrics(
    trial: *const NmTrial,
    j1: usize,
    j2: usize,
    out_metrics: *mut NmSegmentMetrics,
) -> NmStatus {
    guard(|| {
        let t = &trial.as_ref().ok_or_else(|| null("trial"))?.0;
        if out_metrics.is_null() {
            return Err(null("out_metrics"));
        }
        if !(0 < j1 && j1 < j2 && j2 < t.samples.len()) {
            return Err(Fail(
                NmStatus::InvalidArgument,
                format!("boundaries ({j1}, {j2}) invalid for {} samples", t.samples.len()),
            ));
        }
        let b = SegmentBoundaries {
            j1,
            j2,
            source: BoundarySource::Manual,
        };
        let dst = std::slice::from_raw_parts_mut(out_metrics, 2);
        for (slot, seg) in dst.iter_mut().zip(Segment::ALL) {
            let r = metrics::compute_segment(t, &b, seg)?.record;
            *slot = NmSegmentMetrics {
                tt: r.tt,
                p: r.p,
                a: r.a.unwrap_or(f64::NAN),
                c: r.c,
            };
        }
        Ok(())
    })
}

/// 2×2 mixed ANOVA on `n` participants' early and late window means;
/// `experienced[i]` is nonzero for experienced participants.
///
/// # Safety
/// `early`, `late` and `experienced` must each point to `n` elements;
/// `out_anova` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nm_mixed_anova(
    early: *const f64,
    late: *const f64,
    experienced: *const u8,
    n: usize,
    alpha: f64,
    out_anova: *mut NmAnova,
) -> NmStatus {
    guard(|| {
        let (e, l, g) = (
            slice(early, n, "early")?,
            slice(late, n, "late")?,
            slice(experienced, n, "experienced")?,
        );
        let slot = out(out_anova, "out_anova")?;
        let cells: Vec<ParticipantCells> = (0..n)
            .map(|i| ParticipantCells {
                participant_id: format!("p{i}"),
                expertise: if g[i] != 0 {
                    Expertise::Experienced
                } else {
                    Expertise::Novice
                },
                early: e[i],
                late: l[i],
            })
            .collect();
        let r = stats::mixed_anova_2x2(&cells, alpha)?;
        let conv = |x: stats::Effect| NmEffect {
            f: x.f,
            p: x.p,
            df_num: x.df_num,
            df_den: x.df_den,
        };
        *slot = NmAnova {
            expertise: conv(r.expertise),
            trial: conv(r.trial),
            interaction: conv(r.interaction),
            exp_minus_nov: r.effect_sizes.exp_minus_nov,
            late_minus_early: r.effect_sizes.late_minus_early,
        };
        Ok(())
    })
}

/// Percentile bootstrap interval of the mean.
///
/// # Safety
/// `values` must point to `n` doubles; `out_lo` and `out_hi` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nm_bootstrap_ci(
    values: *const f64,
    n: usize,
    level: f64,
    replicates: usize,
    seed: u64,
    out_lo: *mut f64,
    out_hi: *mut f64,
) -> NmStatus {
    guard(|| {
        let v = slice(values, n, "values")?;
        let (lo_slot, hi_slot) = (out(out_lo, "out_lo")?, out(out_hi, "out_hi")?);
        let (lo, hi) = stats::bootstrap_ci(v, level, replicates, seed)?;
        *lo_slot = lo;
        *hi_slot = hi;
        Ok(())
    })
}
