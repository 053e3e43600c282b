//! End-of-transport (segment I) and end-of-insertion (segment II) detection.
//!
//! Teleoperated trials use the recorded speed, the tip's lateral position and
//! the jaw angle. Open trials use prefiltered copies of speed, opening angle and
//! lateral velocity; those copies exist only inside [`segment_open`].
//! Whenever a rule has no witness the trial is reported as a failure and must be
//! resolved through a manual override.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, ExtremumKind};
use crate::error::{Error, Result};
use crate::ingest::{Condition, Trial};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationParams {
    /// Teleoperated: candidate minima must lie below this percentile of speed.
    pub speed_percentile: f64,
    /// Teleoperated: lateral position gate, mm (`x < x_threshold`).
    pub x_threshold: f64,
    /// Teleoperated: time gate from trial start, s (`t > t_min`).
    pub t_min: f64,
    /// Teleoperated: jaw angle above which the gripper counts as open, rad.
    pub gripper_open_epsilon: f64,
    /// Open: |v_x| threshold for the transport peak and end, mm/s.
    pub open_speed_threshold: f64,
    /// Open: fraction of the largest opening rate a candidate must reach.
    pub open_phi_rate_fraction: f64,
    /// Open: prefilter cutoffs (Hz) for speed, opening angle and v_x.
    pub open_speed_cutoff: f64,
    pub open_phi_cutoff: f64,
    pub open_vx_cutoff: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            speed_percentile: 25.0,
            x_threshold: -135.0,
            t_min: 0.5,
            gripper_open_epsilon: 0.0,
            open_speed_threshold: 20.0,
            open_phi_rate_fraction: 0.8,
            open_speed_cutoff: 4.0,
            open_phi_cutoff: 8.0,
            open_vx_cutoff: 3.0,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self, rate: f64) -> Result<()> {
        let nyquist = rate / 2.0;
        if !(self.speed_percentile > 0.0 && self.speed_percentile < 100.0) {
            return Err(Error::Config(format!(
                "speed_percentile {} outside (0, 100)",
                self.speed_percentile
            )));
        }
        if !(self.open_phi_rate_fraction > 0.0 && self.open_phi_rate_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "open_phi_rate_fraction {} outside (0, 1]",
                self.open_phi_rate_fraction
            )));
        }
        for (name, fc) in [
            ("open_speed_cutoff", self.open_speed_cutoff),
            ("open_phi_cutoff", self.open_phi_cutoff),
            ("open_vx_cutoff", self.open_vx_cutoff),
        ] {
            if !(fc > 0.0 && fc < nyquist) {
                return Err(Error::Config(format!("{name} {fc} Hz outside (0, {nyquist}) Hz")));
            }
        }
        if !(self.t_min.is_finite() && self.x_threshold.is_finite() && self.open_speed_threshold > 0.0) {
            return Err(Error::Config("segmentation thresholds must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundarySource {
    Auto,
    Manual,
}

impl BoundarySource {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundarySource::Auto => "auto",
            BoundarySource::Manual => "manual",
        }
    }
}

/// Sample indices (0-based, into the uniform trial grid) ending segments I and II.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentBoundaries {
    pub j1: usize,
    pub j2: usize,
    pub source: BoundarySource,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum SegmentationFailure {
    #[error("no speed minimum satisfies the percentile, position and time gates")]
    NoTransportEnd,
    #[error("gripper never opens after the end of transport")]
    GripperNeverOpens,
    #[error("|v_x| never peaks above the speed threshold")]
    NoTransportPeak,
    #[error("no |v_x| minimum below the speed threshold after the peak")]
    NoTransportMinimum,
    #[error("no opening-rate maximum reaches the required fraction of the largest rate")]
    NoOpeningRate,
    #[error("no speed minimum between transport end and opening")]
    NoInsertionEnd,
    #[error("trial too short to segment")]
    TooShort,
}

/// Result of automatic segmentation for one trial.
pub type Outcome = std::result::Result<SegmentBoundaries, SegmentationFailure>;

fn teleoperated_j1(trial: &Trial, params: &SegmentationParams) -> Option<usize> {
    let samples = &trial.samples;
    let speed: Vec<f64> = samples.iter().map(|s| s.speed()).collect();
    let limit = dsp::percentile(&speed, params.speed_percentile)?;
    let t0 = samples[0].t;
    dsp::local_extrema(&speed, ExtremumKind::Min)
        .into_iter()
        .find(|&j| speed[j] < limit && samples[j].x[0] < params.x_threshold && samples[j].t - t0 > params.t_min)
}

/// Teleoperated rules: `j1` is the first speed minimum below the percentile
/// limit with `x < x_threshold` and `t > t_min`; `j2` is the first later
/// sample with the jaw open.
pub fn segment_teleoperated(trial: &Trial, params: &SegmentationParams) -> Outcome {
    if trial.samples.len() < 3 {
        return Err(SegmentationFailure::TooShort);
    }
    let j1 = teleoperated_j1(trial, params).ok_or(SegmentationFailure::NoTransportEnd)?;
    let j2 = (j1 + 1..trial.samples.len())
        .find(|&j| trial.samples[j].phi > params.gripper_open_epsilon)
        .ok_or(SegmentationFailure::GripperNeverOpens)?;
    Ok(SegmentBoundaries {
        j1,
        j2,
        source: BoundarySource::Auto,
    })
}

/// Open rules, on prefiltered copies of speed, opening angle and v_x:
///
/// * `j_peak`: first local maximum of |v_x| above the speed threshold;
/// * `j1`: first local minimum of |v_x| below the threshold after `j_peak`;
/// * `j_max`: first local maximum of the per-sample opening-angle difference
///   that reaches the configured fraction of its largest value;
/// * `j2`: last local speed minimum before `j_max`.
pub fn segment_open(trial: &Trial, params: &SegmentationParams, rate: f64) -> Outcome {
    let samples = &trial.samples;
    if samples.len() < dsp::FILTFILT_MIN_LEN {
        return Err(SegmentationFailure::TooShort);
    }
    let prefilter = |values: Vec<f64>, cutoff: f64| {
        dsp::filtfilt_butter2(&values, rate, cutoff).map_err(|_| SegmentationFailure::TooShort)
    };
    let speed = prefilter(samples.iter().map(|s| s.speed()).collect(), params.open_speed_cutoff)?;
    let phi = prefilter(samples.iter().map(|s| s.phi).collect(), params.open_phi_cutoff)?;
    let vx: Vec<f64> = prefilter(samples.iter().map(|s| s.v[0]).collect(), params.open_vx_cutoff)?
        .into_iter()
        .map(f64::abs)
        .collect();

    let threshold = params.open_speed_threshold;
    let j_peak = dsp::local_extrema(&vx, ExtremumKind::Max)
        .into_iter()
        .find(|&j| vx[j] > threshold)
        .ok_or(SegmentationFailure::NoTransportPeak)?;
    let j1 = dsp::local_extrema(&vx, ExtremumKind::Min)
        .into_iter()
        .find(|&j| j > j_peak && vx[j] < threshold)
        .ok_or(SegmentationFailure::NoTransportMinimum)?;

    // dphi[k] is the change from sample k to k + 1
    let dphi: Vec<f64> = phi.windows(2).map(|w| w[1] - w[0]).collect();
    let largest = dphi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(largest > 0.0) {
        return Err(SegmentationFailure::NoOpeningRate);
    }
    let j_max = dsp::local_extrema(&dphi, ExtremumKind::Max)
        .into_iter()
        .find(|&k| dphi[k] >= params.open_phi_rate_fraction * largest)
        .ok_or(SegmentationFailure::NoOpeningRate)?
        + 1;

    let j2 = dsp::local_extrema(&speed, ExtremumKind::Min)
        .into_iter()
        .take_while(|&j| j < j_max)
        .last()
        .filter(|&j| j > j1)
        .ok_or(SegmentationFailure::NoInsertionEnd)?;
    Ok(SegmentBoundaries {
        j1,
        j2,
        source: BoundarySource::Auto,
    })
}

/// Dispatches on the trial's condition.
pub fn segment_trial(trial: &Trial, params: &SegmentationParams, rate: f64) -> Outcome {
    match trial.meta.condition {
        Condition::Teleoperated => segment_teleoperated(trial, params),
        Condition::Open => segment_open(trial, params, rate),
    }
}

/// One row of a manual override table; times are on the trial clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideEntry {
    pub trial_id: String,
    pub j1_time_s: f64,
    pub j2_time_s: f64,
}

pub fn load_overrides(path: &Path) -> Result<Vec<OverrideEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ["trial_id", "j1_time_s", "j2_time_s"] {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            detail: format!(
                "expected header `trial_id,j1_time_s,j2_time_s`, found `{}`",
                header.join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

fn snap(times: &[f64], t: f64, trial_id: &str) -> Result<usize> {
    let (start, end) = (times[0], times[times.len() - 1]);
    if !(t >= start && t <= end) {
        return Err(Error::Override(format!(
            "{trial_id}: time {t} s outside trial span [{start}, {end}] s"
        )));
    }
    let k = times.partition_point(|&tk| tk < t);
    Ok(if k == 0 {
        0
    } else if k == times.len() || (t - times[k - 1]) <= (times[k] - t) {
        k - 1
    } else {
        k
    })
}

/// Snaps override times to the nearest samples of `times`.
pub fn override_boundaries(times: &[f64], entry: &OverrideEntry) -> Result<SegmentBoundaries> {
    if times.len() < 3 {
        return Err(Error::Override(format!("{}: trial too short", entry.trial_id)));
    }
    let j1 = snap(times, entry.j1_time_s, &entry.trial_id)?;
    let j2 = snap(times, entry.j2_time_s, &entry.trial_id)?;
    if j1 == 0 {
        return Err(Error::Override(format!("{}: segment I would be empty", entry.trial_id)));
    }
    if j1 >= j2 {
        return Err(Error::Override(format!(
            "{}: j1 ({} s) must precede j2 ({} s) after snapping",
            entry.trial_id, entry.j1_time_s, entry.j2_time_s
        )));
    }
    Ok(SegmentBoundaries {
        j1,
        j2,
        source: BoundarySource::Manual,
    })
}

/// Replaces automatic outcomes with manual boundaries.
///
/// `outcomes` maps trial ids to automatic results; `times` supplies each
/// trial's sample grid. Every override must name a known trial.
pub fn apply_overrides(
    outcomes: &mut BTreeMap<String, Outcome>,
    times: &BTreeMap<String, Vec<f64>>,
    overrides: &[OverrideEntry],
) -> Result<()> {
    for entry in overrides {
        let grid = times
            .get(&entry.trial_id)
            .ok_or_else(|| Error::Override(format!("override names unknown trial `{}`", entry.trial_id)))?;
        let b = override_boundaries(grid, entry)?;
        outcomes.insert(entry.trial_id.clone(), Ok(b));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Expertise, PoseSample, TrialMeta};
    use crate::rotations::UnitQuaternion;

    fn meta(condition: Condition) -> TrialMeta {
        TrialMeta {
            trial_id: "t".into(),
            participant_id: "p".into(),
            expertise: Expertise::Novice,
            condition,
            trial_number: 1,
            excluded: false,
            exclusion_reason: None,
        }
    }

    fn trial(condition: Condition, n: usize, f: impl Fn(f64) -> (f64, f64, f64)) -> Trial {
        let samples = (0..n)
            .map(|k| {
                let t = k as f64 / 100.0;
                let (x, speed, phi) = f(t);
                PoseSample {
                    t,
                    x: [x, 0.0, 0.0],
                    v: [speed, 0.0, 0.0],
                    q: UnitQuaternion::IDENTITY,
                    phi,
                }
            })
            .collect();
        Trial {
            meta: meta(condition),
            samples,
            left_orientation: None,
        }
    }

    #[test]
    fn closed_gripper_fails_j2() {
        let tr = trial(Condition::Teleoperated, 400, |t| {
            let s = (std::f64::consts::PI * t / 1.5).sin().abs() * 50.0 + 1.0;
            (-150.0, s, 0.0)
        });
        let params = SegmentationParams::default();
        assert!(teleoperated_j1(&tr, &params).is_some());
        assert_eq!(
            segment_teleoperated(&tr, &params),
            Err(SegmentationFailure::GripperNeverOpens)
        );
    }

    #[test]
    fn never_fast_open_trial_fails_at_peak() {
        let tr = trial(Condition::Open, 300, |t| (0.0, 10.0 * (t * 3.0).sin(), t));
        assert_eq!(
            segment_open(&tr, &SegmentationParams::default(), 100.0),
            Err(SegmentationFailure::NoTransportPeak)
        );
    }

    #[test]
    fn override_snapping() {
        let times: Vec<f64> = (0..401).map(|k| k as f64 / 100.0).collect();
        let e = OverrideEntry {
            trial_id: "a".into(),
            j1_time_s: 1.0,
            j2_time_s: 2.5,
        };
        let b = override_boundaries(&times, &e).unwrap();
        // 1-based 101 and 251
        assert_eq!((b.j1, b.j2, b.source), (100, 250, BoundarySource::Manual));
        let b = override_boundaries(
            &times,
            &OverrideEntry {
                j1_time_s: 1.004,
                j2_time_s: 2.506,
                ..e.clone()
            },
        )
        .unwrap();
        assert_eq!((b.j1, b.j2), (100, 251));
    }

    #[test]
    fn override_errors() {
        let times: Vec<f64> = (0..401).map(|k| k as f64 / 100.0).collect();
        let e = OverrideEntry {
            trial_id: "a".into(),
            j1_time_s: 2.5,
            j2_time_s: 1.0,
        };
        assert!(matches!(override_boundaries(&times, &e), Err(Error::Override(_))));
        let e = OverrideEntry {
            j1_time_s: 1.0,
            j2_time_s: 4.5,
            ..e
        };
        assert!(matches!(override_boundaries(&times, &e), Err(Error::Override(_))));

        let mut outcomes = BTreeMap::new();
        let grids = BTreeMap::from([("a".to_string(), times)]);
        let unknown = OverrideEntry {
            trial_id: "zz".into(),
            j1_time_s: 1.0,
            j2_time_s: 2.0,
        };
        assert!(matches!(
            apply_overrides(&mut outcomes, &grids, &[unknown]),
            Err(Error::Override(_))
        ));
    }

    #[test]
    fn params_validation() {
        let p = SegmentationParams::default();
        assert!(p.validate(100.0).is_ok());
        let bad = SegmentationParams {
            open_speed_cutoff: 60.0,
            ..p
        };
        assert!(bad.validate(100.0).is_err());
        let bad = SegmentationParams {
            speed_percentile: 100.0,
            ..p
        };
        assert!(bad.validate(100.0).is_err());
    }
}
