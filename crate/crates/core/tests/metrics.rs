mod common;

use approx::assert_relative_eq;

use needlemetrics::ingest::{Condition, PoseSample, Trial};
use needlemetrics::metrics::{self, Segment, SegmentObservation, Tracker};
use needlemetrics::rotations::UnitQuaternion;
use needlemetrics::segmentation::{BoundarySource, SegmentBoundaries};
use needlemetrics::synth::{self, TrialScript};

const RATE: f64 = 100.0;

/// Helix about z: radius `r`, angular rate `w`, axial speed `c`; the
/// instrument turns with the tip.
fn helix(r: f64, w: f64, c: f64, seconds: f64, condition: Condition) -> Trial {
    let n = (seconds * RATE).round() as usize + 1;
    let samples = (0..n)
        .map(|k| {
            let t = k as f64 / RATE;
            PoseSample {
                t,
                x: [r * (w * t).cos(), r * (w * t).sin(), c * t],
                v: [-r * w * (w * t).sin(), r * w * (w * t).cos(), c],
                q: UnitQuaternion::from_axis_angle(&[0.0, 0.0, 1.0], w * t),
                phi: 0.0,
            }
        })
        .collect();
    Trial {
        meta: common::meta("helix", condition),
        samples,
        left_orientation: None,
    }
}

fn boundaries(j1: usize, j2: usize) -> SegmentBoundaries {
    SegmentBoundaries {
        j1,
        j2,
        source: BoundarySource::Manual,
    }
}

#[test]
fn helix_matches_closed_form() {
    for (r, w, c) in [(10.0, 1.2, 0.0), (10.0, 1.2, 6.0), (4.0, 2.5, 1.0), (25.0, 0.3, 3.0)] {
        let trial = helix(r, w, c, 4.0, Condition::Teleoperated);
        let obs = metrics::compute_trial(&trial, &boundaries(150, 400)).unwrap();
        for (o, seconds) in obs.iter().zip([1.5, 2.5]) {
            let speed = ((r * w).powi(2) + c * c).sqrt();
            let m = &o.record;
            assert_relative_eq!(m.tt, seconds, epsilon = 1e-12);
            // chord sums converge to the arc as (wΔt)²/24
            assert_relative_eq!(m.p, speed * seconds, max_relative = 1e-4);
            assert_relative_eq!(m.c, w, max_relative = 1e-9);
            assert_relative_eq!(m.a.unwrap(), w / speed, max_relative = 1e-4);
            assert_eq!(m.tracker_used, Tracker::NotApplicable);
        }
    }
}

#[test]
fn pure_translation_has_zero_rotation_metrics() {
    let trial = helix(0.0, 0.0, 5.0, 3.0, Condition::Teleoperated);
    for o in metrics::compute_trial(&trial, &boundaries(100, 250)).unwrap() {
        assert_eq!(o.record.c, 0.0);
        assert_eq!(o.record.a, Some(0.0));
        assert!(o.record.p > 0.0);
    }
}

#[test]
fn stationary_tip_leaves_a_undefined() {
    let trial = helix(0.0, 1.0, 0.0, 3.0, Condition::Teleoperated);
    let o = metrics::compute_segment(&trial, &boundaries(100, 250), Segment::II).unwrap();
    assert_eq!(o.record.p, 0.0);
    assert_eq!(o.record.a, None);
    assert_relative_eq!(o.record.c, 1.0, max_relative = 1e-9);
}

#[test]
fn segment_ranges_share_the_boundary_sample() {
    let b = boundaries(10, 30);
    assert_eq!(Segment::I.range(&b), (0, 10));
    assert_eq!(Segment::II.range(&b), (10, 30));
    let trial = helix(10.0, 1.0, 0.0, 1.0, Condition::Teleoperated);
    assert!(metrics::compute_segment(&trial, &boundaries(50, 50), Segment::II).is_err());
    assert!(metrics::compute_segment(&trial, &boundaries(50, 500), Segment::II).is_err());
}

#[test]
fn open_trials_use_the_steadier_tracker() {
    let mut trial = helix(10.0, 1.0, 0.0, 3.0, Condition::Open);
    let right: Vec<UnitQuaternion> = trial.samples.iter().map(|s| s.q).collect();
    // left tracker: same motion plus a wobble about x
    let left: Vec<UnitQuaternion> = trial
        .samples
        .iter()
        .map(|s| {
            s.q.mul(&UnitQuaternion::from_axis_angle(
                &[1.0, 0.0, 0.0],
                0.1 * (8.0 * s.t).sin(),
            ))
        })
        .collect();
    trial.left_orientation = Some(left.clone());
    let o = metrics::compute_segment(&trial, &boundaries(100, 250), Segment::II).unwrap();
    assert_eq!(o.record.tracker_used, Tracker::Right);
    assert_relative_eq!(o.record.c, 1.0, max_relative = 1e-9);

    // swap the streams: the left one is now the steady one
    for (s, q) in trial.samples.iter_mut().zip(&left) {
        s.q = *q;
    }
    trial.left_orientation = Some(right.clone());
    let o = metrics::compute_segment(&trial, &boundaries(100, 250), Segment::II).unwrap();
    assert_eq!(o.record.tracker_used, Tracker::Left);
    assert_relative_eq!(o.record.c, 1.0, max_relative = 1e-9);

    // identical streams tie and go right
    trial.left_orientation = Some(trial.samples.iter().map(|s| s.q).collect());
    let o = metrics::compute_segment(&trial, &boundaries(100, 250), Segment::II).unwrap();
    assert_eq!(o.record.tracker_used, Tracker::Right);

    trial.left_orientation = None;
    assert!(metrics::compute_segment(&trial, &boundaries(100, 250), Segment::II).is_err());
}

fn obs(condition: Condition, participant: &str, trial: u32, segment: Segment, dtheta: Vec<f64>) -> SegmentObservation {
    let mut t = helix(1.0, 1.0, 0.0, 0.1, condition);
    t.meta.participant_id = participant.into();
    t.meta.trial_id = format!("{participant}-{trial}");
    t.meta.trial_number = trial;
    t.left_orientation = Some(t.samples.iter().map(|s| s.q).collect());
    let mut o = metrics::compute_segment(&t, &boundaries(2, 5), segment).unwrap();
    o.dtheta = dtheta;
    o
}

#[test]
fn outlier_threshold_is_strict_and_grouped() {
    // 69 unit steps and one spike s pool to mean (69 + s)/70, which is
    // exactly s/35 at s = 69
    let group = |spike: f64| {
        vec![
            obs(Condition::Teleoperated, "A", 1, Segment::II, vec![1.0; 40]),
            obs(
                Condition::Teleoperated,
                "A",
                2,
                Segment::II,
                [vec![1.0; 29], vec![spike]].concat(),
            ),
            // same participant in another condition or segment: separate groups
            obs(Condition::Open, "A", 1, Segment::II, vec![0.01; 20]),
            obs(Condition::Teleoperated, "A", 1, Segment::I, vec![0.01; 20]),
        ]
    };
    let mut below = group(69.0 * (1.0 - 1e-9));
    assert!(metrics::remove_outlier_segments(&mut below, 35.0).is_empty());

    let mut above = group(69.0 * (1.0 + 1e-9));
    let removed = metrics::remove_outlier_segments(&mut above, 35.0);
    assert_eq!(removed.len(), 1);
    assert_eq!(removed[0].trial_id, "A-2");
    assert_relative_eq!(removed[0].max_dtheta / removed[0].group_mean, 35.0, max_relative = 1e-8);
    let flags: Vec<bool> = above.iter().map(|o| o.record.outlier_removed).collect();
    assert_eq!(flags, [false, true, false, false]);
}

#[test]
fn empty_angle_streams_are_ignored() {
    let mut all = vec![obs(Condition::Teleoperated, "B", 1, Segment::I, vec![])];
    assert!(metrics::remove_outlier_segments(&mut all, 35.0).is_empty());
}

#[test]
fn metrics_table_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let trial = helix(0.0, 1.0, 0.0, 3.0, Condition::Teleoperated);
    let records: Vec<_> = metrics::compute_trial(&trial, &boundaries(100, 250))
        .unwrap()
        .into_iter()
        .map(|o| o.record)
        .collect();
    metrics::write_metrics(&path, &records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(
        "trial_id,participant_id,expertise,condition,trial_number,segment,TT_s,P_mm,A_rad_per_mm,C_rad_per_s,tracker_used,outlier_removed,seg_source"
    ));
    assert_eq!(metrics::read_metrics(&path).unwrap(), records);
}

#[test]
fn filtering_rounds_velocity_steps() {
    // constant-rate insertion starts and stops abruptly; the 6 Hz position
    // filter shortens the measured arc by just under one percent
    let script = common::noiseless(TrialScript::teleoperated());
    let s = synth::generate_trial(&script, 1, "step").unwrap();
    let trial = common::ingest_synth("step", &s);
    let b = common::truth_boundaries(&trial, &s);
    let o = metrics::compute_segment(&trial, &b, Segment::II).unwrap();
    let ratio = o.record.p / s.truth.true_P[&Segment::II];
    assert!((0.985..0.995).contains(&ratio), "{ratio}");
    assert_relative_eq!(o.record.c, s.truth.true_C[&Segment::II], max_relative = 0.01);
}
