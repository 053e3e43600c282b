//! Per-segment skill metrics: task time (TT), path length (P), normalized
//! angular displacement (A) and rate of orientation change (C), plus the
//! dual-tracker selection and the cohort outlier rule.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Condition, Expertise, Trial};
use crate::rotations::{self, UnitQuaternion, Vec3};
use crate::segmentation::{BoundarySource, SegmentBoundaries};

/// Default multiplier of the group-mean angle above which a step is an outlier.
pub const OUTLIER_MULTIPLIER: f64 = 35.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    I,
    II,
}

impl Segment {
    pub const ALL: [Segment; 2] = [Segment::I, Segment::II];

    pub fn as_str(&self) -> &'static str {
        match self {
            Segment::I => "I",
            Segment::II => "II",
        }
    }

    /// Inclusive sample range `(first, last)` of this segment. Segment I runs
    /// from the first sample to `j1`, segment II from `j1` to `j2`.
    pub fn range(&self, b: &SegmentBoundaries) -> (usize, usize) {
        match self {
            Segment::I => (0, b.j1),
            Segment::II => (b.j1, b.j2),
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tracker {
    #[serde(rename = "right")]
    Right,
    #[serde(rename = "left")]
    Left,
    #[serde(rename = "n/a")]
    NotApplicable,
}

/// Displacement, rotation angle and time step between consecutive samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDelta {
    pub dd: f64,
    pub dtheta: f64,
    pub dt: f64,
}

pub fn frame_deltas(times: &[f64], x: &[Vec3], q: &[UnitQuaternion]) -> Vec<FrameDelta> {
    (1..times.len().min(x.len()).min(q.len()))
        .map(|k| FrameDelta {
            dd: rotations::norm(&rotations::sub(&x[k], &x[k - 1])),
            dtheta: rotations::rotation_angle(&q[k - 1], &q[k]),
            dt: times[k] - times[k - 1],
        })
        .collect()
}

fn need_two(n: usize, what: &str) -> Result<()> {
    if n < 2 {
        return Err(Error::DegenerateSegment(format!(
            "{what} needs at least 2 samples, segment has {n}"
        )));
    }
    Ok(())
}

/// Elapsed time between the first and last sample of a segment, s.
pub fn task_time(times: &[f64], b: &SegmentBoundaries, segment: Segment) -> Result<f64> {
    let (first, last) = segment.range(b);
    if last <= first || last >= times.len() {
        return Err(Error::DegenerateSegment(format!(
            "segment {segment} spans samples {first}..={last} of {}",
            times.len()
        )));
    }
    Ok(times[last] - times[first])
}

pub fn path_length(x: &[Vec3]) -> Result<f64> {
    need_two(x.len(), "path length")?;
    Ok(x.windows(2)
        .map(|w| rotations::norm(&rotations::sub(&w[1], &w[0])))
        .sum())
}

/// Rotation angle between consecutive orientations, rad.
pub fn angle_steps(q: &[UnitQuaternion]) -> Vec<f64> {
    q.windows(2).map(|w| rotations::rotation_angle(&w[0], &w[1])).collect()
}

/// Total rotation divided by path length, rad/mm.
pub fn angular_displacement_normalized(x: &[Vec3], q: &[UnitQuaternion]) -> Result<f64> {
    need_two(q.len(), "angular displacement")?;
    normalized_from_steps(&angle_steps(q), path_length(x)?)
}

fn normalized_from_steps(dtheta: &[f64], p: f64) -> Result<f64> {
    if p <= 0.0 {
        return Err(Error::UndefinedMetric(
            "normalized angular displacement with zero path length".into(),
        ));
    }
    Ok(dtheta.iter().sum::<f64>() / p)
}

/// Mean of the per-step angular rates, rad/s.
pub fn orientation_change_rate(times: &[f64], q: &[UnitQuaternion]) -> Result<f64> {
    need_two(q.len().min(times.len()), "rate of orientation change")?;
    rate_from_steps(times, &angle_steps(q))
}

fn rate_from_steps(times: &[f64], dtheta: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for (k, d) in dtheta.iter().enumerate() {
        let dt = times[k + 1] - times[k];
        if !(dt > 0.0) {
            return Err(Error::InvalidSignal(format!("non-increasing time at step {k}")));
        }
        sum += d / dt;
    }
    Ok(sum / dtheta.len() as f64)
}

/// Picks the tracker whose orientation stream rotates less over the sample
/// range `first..=last`; ties go to the right tracker. Teleoperated trials
/// have a single stream and report [`Tracker::NotApplicable`].
pub fn select_tracker(trial: &Trial, first: usize, last: usize) -> Result<(Tracker, Vec<f64>)> {
    let right: Vec<UnitQuaternion> = trial.samples[first..=last].iter().map(|s| s.q).collect();
    let right = angle_steps(&right);
    match trial.meta.condition {
        Condition::Teleoperated => Ok((Tracker::NotApplicable, right)),
        Condition::Open => {
            let left = trial
                .left_orientation
                .as_ref()
                .ok_or_else(|| Error::Data(format!("{}: left tracker orientation missing", trial.meta.trial_id)))?;
            if left.len() != trial.samples.len() {
                return Err(Error::Data(format!(
                    "{}: left tracker has {} samples, right has {}",
                    trial.meta.trial_id,
                    left.len(),
                    trial.samples.len()
                )));
            }
            let left = angle_steps(&left[first..=last]);
            if left.iter().sum::<f64>() < right.iter().sum::<f64>() {
                Ok((Tracker::Left, left))
            } else {
                Ok((Tracker::Right, right))
            }
        }
    }
}

/// Metrics of one trial segment, with the angle stream kept for the outlier rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentObservation {
    pub record: MetricRecord,
    pub dtheta: Vec<f64>,
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub trial_id: String,
    pub participant_id: String,
    pub expertise: Expertise,
    pub condition: Condition,
    pub trial_number: u32,
    pub segment: Segment,
    #[serde(rename = "TT_s")]
    pub tt: f64,
    #[serde(rename = "P_mm")]
    pub p: f64,
    /// Empty when the path length is zero.
    #[serde(rename = "A_rad_per_mm")]
    pub a: Option<f64>,
    #[serde(rename = "C_rad_per_s")]
    pub c: f64,
    pub tracker_used: Tracker,
    pub outlier_removed: bool,
    pub seg_source: BoundarySource,
}

pub fn compute_segment(trial: &Trial, b: &SegmentBoundaries, segment: Segment) -> Result<SegmentObservation> {
    let times = trial.times();
    let tt = task_time(&times, b, segment)?;
    let (first, last) = segment.range(b);
    let x: Vec<Vec3> = trial.samples[first..=last].iter().map(|s| s.x).collect();
    let p = path_length(&x)?;
    let (tracker, dtheta) = select_tracker(trial, first, last)?;
    let a = normalized_from_steps(&dtheta, p).ok();
    let c = rate_from_steps(&times[first..=last], &dtheta)?;
    let m = &trial.meta;
    Ok(SegmentObservation {
        record: MetricRecord {
            trial_id: m.trial_id.clone(),
            participant_id: m.participant_id.clone(),
            expertise: m.expertise,
            condition: m.condition,
            trial_number: m.trial_number,
            segment,
            tt,
            p,
            a,
            c,
            tracker_used: tracker,
            outlier_removed: false,
            seg_source: b.source,
        },
        dtheta,
    })
}

/// Metrics for segments I and II.
pub fn compute_trial(trial: &Trial, b: &SegmentBoundaries) -> Result<Vec<SegmentObservation>> {
    Segment::ALL.iter().map(|&s| compute_segment(trial, b, s)).collect()
}

/// A segment dropped by [`remove_outlier_segments`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierRemoval {
    pub trial_id: String,
    pub segment: Segment,
    pub max_dtheta: f64,
    pub group_mean: f64,
}

/// Flags every trial segment containing a step angle greater than
/// `multiplier` times the mean step angle of its (condition, participant,
/// segment) group, pooled over all of that group's steps.
pub fn remove_outlier_segments(obs: &mut [SegmentObservation], multiplier: f64) -> Vec<OutlierRemoval> {
    let mut groups: BTreeMap<(Condition, String, Segment), (f64, usize)> = BTreeMap::new();
    for o in obs.iter() {
        let r = &o.record;
        let g = groups
            .entry((r.condition, r.participant_id.clone(), r.segment))
            .or_insert((0.0, 0));
        g.0 += o.dtheta.iter().sum::<f64>();
        g.1 += o.dtheta.len();
    }
    let mut removed = Vec::new();
    for o in obs.iter_mut() {
        let r = &o.record;
        let (sum, n) = groups[&(r.condition, r.participant_id.clone(), r.segment)];
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let max = o.dtheta.iter().copied().fold(0.0, f64::max);
        if max > multiplier * mean {
            o.record.outlier_removed = true;
            removed.push(OutlierRemoval {
                trial_id: o.record.trial_id.clone(),
                segment: o.record.segment,
                max_dtheta: max,
                group_mean: mean,
            });
        }
    }
    removed
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
