//! Synthetic needle-driving trials with known ground truth.
//!
//! A [`TrialScript`] describes a continuous-time trajectory: an optional
//! hold, minimum-jerk transport legs (segment I), a scripted needle arc
//! (segment II), post-insertion legs and a final hold, together with a
//! gripper schedule. [`synthesize`] samples it at the device rate, adds noise
//! and produces the raw recording plus a ground-truth sidecar computed from
//! the noise-free trajectory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::Biquad;
use crate::error::{Error, Result};
use crate::ingest::{
    self, CalibrationRecording, Condition, Expertise, ManifestEntry, RawRecording, TeleoperatedRow, TrackerFrame,
    TrialMeta,
};
use crate::metrics::Segment;
use crate::rotations::{self, add, scale, sub, Mat3, UnitQuaternion, Vec3};
use crate::stats::replicate_rng;

/// Master-to-patient motion scaling of the "fine" teleoperation mode.
pub const FINE_SCALING: f64 = 0.33;
/// Cutoff of the online velocity filter on the teleoperated channel, Hz.
pub const ONLINE_VELOCITY_CUTOFF: f64 = 20.0;
pub const TELEOPERATED_RATE: f64 = 2000.0;
pub const OPEN_RATE: f64 = 120.0;

/// Minimum-jerk position profile `10τ³ − 15τ⁴ + 6τ⁵` on [0, 1].
pub fn minimum_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Constant,
    MinimumJerk,
    /// Constant rate with raised-cosine rate ramps over the first and last
    /// `ramp` fraction of the segment.
    Plateau {
        ramp: f64,
    },
}

impl Profile {
    fn eval(&self, tau: f64) -> f64 {
        let t = tau.clamp(0.0, 1.0);
        match *self {
            Profile::Constant => t,
            Profile::MinimumJerk => minimum_jerk(t),
            Profile::Plateau { ramp } => {
                // integral of the rate shape, normalized by its area 1 - ramp
                let rising =
                    |u: f64| u / 2.0 - ramp / (2.0 * std::f64::consts::PI) * (std::f64::consts::PI * u / ramp).sin();
                let area = 1.0 - ramp;
                let value = if t < ramp {
                    rising(t)
                } else if t <= 1.0 - ramp {
                    ramp / 2.0 + (t - ramp)
                } else {
                    area - rising(1.0 - t)
                };
                value / area
            }
        }
    }

    fn valid(&self) -> bool {
        match *self {
            Profile::Plateau { ramp } => ramp > 0.0 && ramp <= 0.5,
            _ => true,
        }
    }
}

/// Point-to-point minimum-jerk move, preceded by `delay` seconds at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachLeg {
    #[serde(default)]
    pub delay: f64,
    pub target: Vec3,
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub axis: Vec3,
    pub angle: f64,
}

/// Sinusoidal rotation `amplitude · sin(2π f t)` about a body-frame axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wobble {
    pub axis: Vec3,
    pub amplitude: f64,
    pub frequency: f64,
}

/// Needle arc: the tip rotates about `axis` through `start + center_offset`
/// while the instrument turns by the same rotation; `drift` is an extra
/// minimum-jerk translation over the segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub duration: f64,
    pub axis: Vec3,
    pub center_offset: Vec3,
    pub angle: f64,
    pub profile: Profile,
    #[serde(default)]
    pub drift: Vec3,
    /// Body-frame wobble enveloped by `sin(πτ)` so it vanishes at both ends.
    #[serde(default)]
    pub wobble: Option<Wobble>,
}

/// Cosine ramp of the opening angle to `to` over `[start, start + duration]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperRamp {
    pub start: f64,
    pub duration: f64,
    pub to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    /// Angle before the first ramp, rad.
    pub closed: f64,
    pub ramps: Vec<GripperRamp>,
}

impl Gripper {
    pub fn eval(&self, t: f64) -> f64 {
        let mut phi = self.closed;
        for r in &self.ramps {
            if t <= r.start {
                break;
            }
            let s = ((t - r.start) / r.duration).min(1.0);
            phi += (r.to - phi) * 0.5 * (1.0 - (std::f64::consts::PI * s).cos());
        }
        phi
    }

    /// Closed at `closed`, then one ramp to `open` over `duration` whose
    /// first positive value is reached at `at` (the ramp starts there when
    /// `closed >= 0`).
    pub fn opening_at(closed: f64, open: f64, duration: f64, at: f64) -> Gripper {
        let start = if closed < 0.0 {
            let f = -closed / (open - closed);
            at - duration * (1.0 - 2.0 * f).acos() / std::f64::consts::PI
        } else {
            at
        };
        Gripper {
            closed,
            ramps: vec![GripperRamp {
                start,
                duration,
                to: open,
            }],
        }
    }
}

/// Finger contact on the left open-condition tracker: a wobble about its own
/// x axis (which leaves the opening angle untouched) inside a time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerContact {
    pub start: f64,
    pub end: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Noise {
    /// Position, mm RMS per axis.
    pub position: f64,
    /// Orientation, rad RMS per rotation-vector component.
    pub orientation: f64,
    /// Additive noise on each rotation-matrix entry.
    pub matrix: f64,
    /// Opening angle, rad RMS.
    pub phi: f64,
    /// Teleoperated velocity channel before the online filter, mm/s RMS.
    pub velocity: f64,
    /// Timestamp jitter, s RMS (clamped to 40% of a sample period).
    pub timestamp: f64,
}

impl Noise {
    pub fn realistic(condition: Condition) -> Noise {
        match condition {
            Condition::Teleoperated => Noise {
                position: 0.02,
                orientation: 0.001,
                matrix: 1e-4,
                phi: 0.002,
                velocity: 0.5,
                timestamp: 0.0,
            },
            Condition::Open => Noise {
                position: 0.1,
                orientation: 0.004,
                matrix: 1e-4,
                phi: 0.0,
                velocity: 0.0,
                timestamp: 0.0005,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScript {
    pub condition: Condition,
    pub sample_rate: f64,
    pub start_position: Vec3,
    pub initial_orientation: UnitQuaternion,
    pub hold_start: f64,
    pub transport: Vec<ReachLeg>,
    /// Applied with a minimum-jerk profile from the start of the first leg
    /// to the end of transport.
    pub transport_rotation: AxisAngle,
    pub insertion: Insertion,
    pub post: Vec<ReachLeg>,
    pub hold_end: f64,
    pub gripper: Gripper,
    pub noise: Noise,
    #[serde(default)]
    pub finger_contact: Option<FingerContact>,
    /// Right and left tracker lever arms (open condition).
    pub lever_arms: [Vec3; 2],
    /// Patient = scaling × master (teleoperated).
    pub master_scaling: Option<f64>,
}

impl TrialScript {
    /// Teleoperated script: 1.2 s transport ending at 1.5 s, 2 s constant-rate
    /// insertion of 2.4 rad ending at 3.5 s, gripper opening at 3.5 s.
    pub fn teleoperated() -> TrialScript {
        let insertion = Insertion {
            duration: 2.0,
            axis: [0.0, 1.0, 0.0],
            center_offset: [0.0, 0.0, -10.0],
            angle: 2.4,
            profile: Profile::Constant,
            drift: [0.0; 3],
            wobble: None,
        };
        TrialScript {
            condition: Condition::Teleoperated,
            sample_rate: TELEOPERATED_RATE,
            start_position: [-80.0, 0.0, 0.0],
            initial_orientation: UnitQuaternion::IDENTITY,
            hold_start: 0.3,
            transport: vec![ReachLeg {
                delay: 0.0,
                target: [-145.0, 5.0, 0.0],
                duration: 1.2,
            }],
            transport_rotation: AxisAngle {
                axis: [0.0, 0.0, 1.0],
                angle: 0.4,
            },
            insertion,
            post: vec![
                ReachLeg {
                    delay: 0.1,
                    target: [-130.0, 25.0, 10.0],
                    duration: 1.0,
                },
                ReachLeg {
                    delay: 0.15,
                    target: [-110.0, 30.0, 20.0],
                    duration: 1.0,
                },
            ],
            hold_end: 0.2,
            gripper: Gripper::opening_at(-0.1, 0.8, 0.3, 3.5),
            noise: Noise::default(),
            finger_contact: None,
            lever_arms: [[0.0; 3]; 2],
            master_scaling: Some(FINE_SCALING),
        }
    }

    /// Open script: transport ends at 1.2 s, plateau-profile insertion ends
    /// at 3.0 s, the retreat starts immediately while the driver opens.
    pub fn open() -> TrialScript {
        TrialScript {
            condition: Condition::Open,
            sample_rate: OPEN_RATE,
            hold_start: 0.2,
            transport: vec![ReachLeg {
                delay: 0.0,
                target: [-145.0, 5.0, 0.0],
                duration: 1.0,
            }],
            insertion: Insertion {
                duration: 1.8,
                profile: Profile::Plateau { ramp: 0.1 },
                ..TrialScript::teleoperated().insertion
            },
            post: vec![
                ReachLeg {
                    delay: 0.0,
                    target: [-125.0, 15.0, 25.0],
                    duration: 1.2,
                },
                ReachLeg {
                    delay: 0.15,
                    target: [-100.0, 30.0, 30.0],
                    duration: 1.0,
                },
            ],
            gripper: Gripper::opening_at(0.0, 0.9, 0.2, 3.0),
            lever_arms: [[-150.0, 5.0, 10.0], [-150.0, -5.0, 10.0]],
            master_scaling: None,
            ..TrialScript::teleoperated()
        }
    }

    pub fn transport_end(&self) -> f64 {
        self.hold_start + self.transport.iter().map(|l| l.delay + l.duration).sum::<f64>()
    }

    pub fn insertion_end(&self) -> f64 {
        self.transport_end() + self.insertion.duration
    }

    pub fn duration(&self) -> f64 {
        self.insertion_end() + self.post.iter().map(|l| l.delay + l.duration).sum::<f64>() + self.hold_end
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("trial script: {m}")));
        if !(self.sample_rate > 2.0 * ONLINE_VELOCITY_CUTOFF) {
            return bad(format!("sample rate {} Hz too low", self.sample_rate));
        }
        if self.transport.is_empty() {
            return bad("transport needs at least one leg".into());
        }
        let legs = self.transport.iter().chain(&self.post);
        for leg in legs {
            if !(leg.duration > 0.0 && leg.delay >= 0.0) {
                return bad(format!("leg duration {} / delay {} invalid", leg.duration, leg.delay));
            }
        }
        if !(self.hold_start >= 0.0 && self.hold_end >= 0.0) {
            return bad("holds must be non-negative".into());
        }
        let ins = &self.insertion;
        if !(ins.duration > 0.0) || rotations::norm(&ins.axis) == 0.0 || ins.angle < 0.0 || !ins.profile.valid() {
            return bad("insertion needs a positive duration, a nonzero axis and a non-negative angle".into());
        }
        if rotations::norm(&self.transport_rotation.axis) == 0.0 && self.transport_rotation.angle != 0.0 {
            return bad("transport rotation axis is zero".into());
        }
        let n = &self.noise;
        if [n.position, n.orientation, n.matrix, n.phi, n.velocity, n.timestamp]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("noise levels must be non-negative".into());
        }
        let end = self.duration();
        let mut last = f64::NEG_INFINITY;
        for r in &self.gripper.ramps {
            if !(r.duration > 0.0) || r.start < last || r.start < 0.0 || r.start + r.duration > end {
                return bad(format!(
                    "gripper ramp at {} s (+{} s) overlaps another or lies outside [0, {end}] s",
                    r.start, r.duration
                ));
            }
            last = r.start + r.duration;
        }
        if let Some(fc) = &self.finger_contact {
            if !(fc.start >= 0.0 && fc.end > fc.start && fc.end <= end) {
                return bad("finger contact window outside the trial".into());
            }
        }
        if self.master_scaling.is_some_and(|k| !(k > 0.0)) {
            return bad("master scaling must be positive".into());
        }
        if end * self.sample_rate < 20.0 {
            return bad("trial shorter than 20 samples".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Continuous trajectory

#[derive(Debug, Clone, Copy)]
enum Piece {
    Hold { t0: f64, p: Vec3 },
    Reach { t0: f64, t1: f64, from: Vec3, to: Vec3 },
    Insertion { t0: f64, from: Vec3 },
}

/// Noise-free trajectory of a script.
#[derive(Debug, Clone)]
pub struct Trajectory {
    script: TrialScript,
    pieces: Vec<Piece>,
    transport_rotation_start: f64,
    j1: f64,
    j2: f64,
    insertion_start_orientation: UnitQuaternion,
}

fn push_legs(pieces: &mut Vec<Piece>, t: &mut f64, p: &mut Vec3, legs: &[ReachLeg]) {
    for leg in legs {
        if leg.delay > 0.0 {
            pieces.push(Piece::Hold { t0: *t, p: *p });
            *t += leg.delay;
        }
        pieces.push(Piece::Reach {
            t0: *t,
            t1: *t + leg.duration,
            from: *p,
            to: leg.target,
        });
        *t += leg.duration;
        *p = leg.target;
    }
}

impl Trajectory {
    pub fn new(script: &TrialScript) -> Result<Trajectory> {
        script.validate()?;
        let mut pieces = vec![Piece::Hold {
            t0: 0.0,
            p: script.start_position,
        }];
        let mut t = script.hold_start;
        let mut p = script.start_position;
        push_legs(&mut pieces, &mut t, &mut p, &script.transport);
        let j1 = t;
        pieces.push(Piece::Insertion { t0: t, from: p });
        t += script.insertion.duration;
        let j2 = t;
        let mut traj = Trajectory {
            script: script.clone(),
            pieces: Vec::new(),
            transport_rotation_start: script.hold_start + script.transport[0].delay,
            j1,
            j2,
            insertion_start_orientation: UnitQuaternion::IDENTITY,
        };
        traj.insertion_start_orientation = traj.transport_orientation(j1);
        traj.pieces = pieces;
        let mut p_end = traj.insertion_position(p, 1.0);
        push_legs(&mut traj.pieces, &mut t, &mut p_end, &script.post);
        traj.pieces.push(Piece::Hold { t0: t, p: p_end });
        Ok(traj)
    }

    pub fn script(&self) -> &TrialScript {
        &self.script
    }

    pub fn transport_end(&self) -> f64 {
        self.j1
    }

    pub fn insertion_end(&self) -> f64 {
        self.j2
    }

    fn insertion_rotation(&self, tau: f64) -> UnitQuaternion {
        let ins = &self.script.insertion;
        UnitQuaternion::from_axis_angle(&ins.axis, ins.angle * ins.profile.eval(tau))
    }

    fn insertion_position(&self, from: Vec3, tau: f64) -> Vec3 {
        let ins = &self.script.insertion;
        let center = add(&from, &ins.center_offset);
        let arm = self.insertion_rotation(tau).rotate(&sub(&from, &center));
        add(&add(&center, &arm), &scale(&ins.drift, minimum_jerk(tau)))
    }

    fn transport_orientation(&self, t: f64) -> UnitQuaternion {
        let s = &self.script;
        let span = self.j1 - self.transport_rotation_start;
        let tau = if span > 0.0 {
            (t - self.transport_rotation_start) / span
        } else {
            1.0
        };
        let r = &s.transport_rotation;
        let turn = if r.angle == 0.0 {
            UnitQuaternion::IDENTITY
        } else {
            UnitQuaternion::from_axis_angle(&r.axis, r.angle * minimum_jerk(tau))
        };
        turn.mul(&s.initial_orientation)
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let k = self.pieces.partition_point(|p| piece_start(p) <= t).saturating_sub(1);
        match self.pieces[k] {
            Piece::Hold { p, .. } => p,
            Piece::Reach { t0, t1, from, to } => {
                let s = minimum_jerk((t - t0) / (t1 - t0));
                add(&from, &scale(&sub(&to, &from), s))
            }
            Piece::Insertion { t0, from } => self.insertion_position(from, (t - t0) / self.script.insertion.duration),
        }
    }

    /// Central-difference velocity of the clean position, mm/s.
    pub fn velocity(&self, t: f64) -> Vec3 {
        let h = 1e-6;
        scale(&sub(&self.position(t + h), &self.position(t - h)), 0.5 / h)
    }

    /// Instrument (right tracker) orientation.
    pub fn orientation(&self, t: f64) -> UnitQuaternion {
        if t <= self.j1 {
            return self.transport_orientation(t);
        }
        let ins = &self.script.insertion;
        let tau = ((t - self.j1) / ins.duration).clamp(0.0, 1.0);
        let mut q = self.insertion_rotation(tau).mul(&self.insertion_start_orientation);
        if let (Some(w), true) = (ins.wobble, tau < 1.0) {
            let angle = w.amplitude
                * (2.0 * std::f64::consts::PI * w.frequency * (t - self.j1)).sin()
                * (std::f64::consts::PI * tau).sin();
            q = q.mul(&UnitQuaternion::from_axis_angle(&w.axis, angle));
        }
        q
    }

    pub fn phi(&self, t: f64) -> f64 {
        self.script.gripper.eval(t)
    }

    /// Left open-condition tracker: the instrument turned by the opening
    /// angle about its z axis, plus any finger-contact wobble.
    pub fn left_orientation(&self, t: f64) -> UnitQuaternion {
        let base = self
            .orientation(t)
            .mul(&UnitQuaternion::from_axis_angle(&[0.0, 0.0, 1.0], self.phi(t)));
        match self.script.finger_contact {
            Some(fc) if t > fc.start && t < fc.end => {
                let tau = (t - fc.start) / (fc.end - fc.start);
                let angle = fc.amplitude
                    * (2.0 * std::f64::consts::PI * fc.frequency * (t - fc.start)).sin()
                    * (std::f64::consts::PI * tau).sin();
                base.mul(&UnitQuaternion::from_axis_angle(&[1.0, 0.0, 0.0], angle))
            }
            _ => base,
        }
    }
}

fn piece_start(p: &Piece) -> f64 {
    match *p {
        Piece::Hold { t0, .. } | Piece::Reach { t0, .. } | Piece::Insertion { t0, .. } => t0,
    }
}

// ---------------------------------------------------------------------------
// Ground truth

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_j1_s: f64,
    pub true_j2_s: f64,
    pub true_TT: BTreeMap<Segment, f64>,
    pub true_P: BTreeMap<Segment, f64>,
    pub true_sum_dtheta: BTreeMap<Segment, f64>,
    pub true_C: BTreeMap<Segment, f64>,
    pub script: TrialScript,
}

impl GroundTruth {
    /// Analytic normalized angular displacement, rad/mm (`None` for zero path).
    pub fn a(&self, segment: Segment) -> Option<f64> {
        let p = self.true_P[&segment];
        (p > 0.0).then(|| self.true_sum_dtheta[&segment] / p)
    }
}

/// Composite Simpson integral of the clean speed over [t0, t1].
pub fn arc_length(traj: &Trajectory, t0: f64, t1: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (t1 - t0) / n as f64;
    // one-sided differences at the ends so velocity jumps at a boundary
    // do not leak across it
    let d = 1e-6;
    let f = |k: usize| {
        let t = t0 + h * k as f64;
        let (a, b) = if k == 0 {
            (t, t + d)
        } else if k == n {
            (t - d, t)
        } else {
            (t - d, t + d)
        };
        rotations::norm(&sub(&traj.position(b), &traj.position(a))) / (b - a)
    };
    let mut s = f(0) + f(n);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k);
    }
    s * h / 3.0
}

/// Sum of relative rotation angles of the clean orientation on a fine grid.
pub fn total_rotation(traj: &Trajectory, t0: f64, t1: f64, steps: usize) -> f64 {
    let h = (t1 - t0) / steps as f64;
    let mut prev = traj.orientation(t0);
    let mut total = 0.0;
    for k in 1..=steps {
        let q = traj.orientation(t0 + h * k as f64);
        total += rotations::rotation_angle(&prev, &q);
        prev = q;
    }
    total
}

pub fn ground_truth(traj: &Trajectory) -> GroundTruth {
    let bounds = [
        (Segment::I, 0.0, traj.transport_end()),
        (Segment::II, traj.transport_end(), traj.insertion_end()),
    ];
    let mut tt = BTreeMap::new();
    let mut p = BTreeMap::new();
    let mut dtheta = BTreeMap::new();
    let mut c = BTreeMap::new();
    for (seg, t0, t1) in bounds {
        let steps = ((t1 - t0) * 10_000.0).ceil().max(100.0) as usize;
        let theta = total_rotation(traj, t0, t1, steps);
        tt.insert(seg, t1 - t0);
        p.insert(seg, arc_length(traj, t0, t1, 2 * steps));
        dtheta.insert(seg, theta);
        c.insert(seg, theta / (t1 - t0));
    }
    GroundTruth {
        true_j1_s: traj.transport_end(),
        true_j2_s: traj.insertion_end(),
        true_TT: tt,
        true_P: p,
        true_sum_dtheta: dtheta,
        true_C: c,
        script: traj.script().clone(),
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// A generated trial: the raw recording, its ground truth and, for
/// teleoperated trials, the noise-free master-side positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrial {
    pub raw: RawRecording,
    pub truth: GroundTruth,
    pub master: Option<Vec<(f64, Vec3)>>,
}

fn sample_times(script: &TrialScript, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dt = 1.0 / script.sample_rate;
    let n = (script.duration() * script.sample_rate + 1e-9).floor() as usize + 1;
    let limit = 0.4 * dt;
    let jitter = Normal::new(0.0, script.noise.timestamp.max(f64::MIN_POSITIVE)).expect("finite sd");
    (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            if k == 0 || k == n - 1 || script.noise.timestamp == 0.0 {
                t
            } else {
                t + jitter.sample(rng).clamp(-limit, limit)
            }
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        sd * z
    }
}

fn noisy_vec(rng: &mut ChaCha8Rng, v: Vec3, sd: f64) -> Vec3 {
    [
        v[0] + gaussian(rng, sd),
        v[1] + gaussian(rng, sd),
        v[2] + gaussian(rng, sd),
    ]
}

fn noisy_rotation(rng: &mut ChaCha8Rng, q: &UnitQuaternion, noise: &Noise) -> Mat3 {
    let w = noisy_vec(rng, [0.0; 3], noise.orientation);
    let angle = rotations::norm(&w);
    let q = if angle > 0.0 {
        q.mul(&UnitQuaternion::from_axis_angle(&w, angle))
    } else {
        *q
    };
    let mut m = *q.to_rotation_matrix().as_array();
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v += gaussian(rng, noise.matrix);
        }
    }
    m
}

/// Samples a script into a raw recording with ground truth.
pub fn synthesize(script: &TrialScript, rng: &mut ChaCha8Rng) -> Result<SynthTrial> {
    let traj = Trajectory::new(script)?;
    let truth = ground_truth(&traj);
    let times = sample_times(script, rng);
    let noise = script.noise;
    match script.condition {
        Condition::Teleoperated => {
            let k = script.master_scaling.unwrap_or(1.0);
            let master: Vec<(f64, Vec3)> = times.iter().map(|&t| (t, scale(&traj.position(t), 1.0 / k))).collect();
            // online velocity channel: causal filter of the derivative
            let online = Biquad::butterworth_lowpass(ONLINE_VELOCITY_CUTOFF, script.sample_rate)?;
            let raw_v: Vec<Vec3> = times
                .iter()
                .map(|&t| noisy_vec(rng, traj.velocity(t), noise.velocity))
                .collect();
            let channels: Vec<Vec<f64>> = (0..3)
                .map(|a| online.filter(&raw_v.iter().map(|v| v[a]).collect::<Vec<_>>()))
                .collect();
            let rows = times
                .iter()
                .zip(&master)
                .enumerate()
                .map(|(i, (&t, (_, xm)))| TeleoperatedRow {
                    t,
                    position: noisy_vec(rng, scale(xm, k), noise.position),
                    velocity: [channels[0][i], channels[1][i], channels[2][i]],
                    rotation: noisy_rotation(rng, &traj.orientation(t), &noise),
                    phi: traj.phi(t) + gaussian(rng, noise.phi),
                })
                .collect();
            Ok(SynthTrial {
                raw: RawRecording::Teleoperated(rows),
                truth,
                master: script.master_scaling.map(|_| master),
            })
        }
        Condition::Open => {
            let [arm_r, arm_l] = script.lever_arms;
            let frames = times
                .iter()
                .map(|&t| {
                    let tip = traj.position(t);
                    let qr = traj.orientation(t);
                    let ql = traj.left_orientation(t);
                    let xr = sub(&tip, &qr.rotate(&arm_r));
                    let xl = sub(&tip, &ql.rotate(&arm_l));
                    TrackerFrame {
                        t,
                        right_position: noisy_vec(rng, xr, noise.position),
                        right_rotation: noisy_rotation(rng, &qr, &noise),
                        left_position: noisy_vec(rng, xl, noise.position),
                        left_rotation: noisy_rotation(rng, &ql, &noise),
                    }
                })
                .collect();
            Ok(SynthTrial {
                raw: RawRecording::Open(frames),
                truth,
                master: None,
            })
        }
    }
}

/// 64-bit FNV-1a, used to derive per-trial RNG streams from trial ids.
pub fn stream_id(key: &str) -> u64 {
    key.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Generates a trial with the RNG stream of `(seed, key)`.
pub fn generate_trial(script: &TrialScript, seed: u64, key: &str) -> Result<SynthTrial> {
    synthesize(script, &mut replicate_rng(seed, stream_id(key)))
}

/// Writes `<stem>.csv`, `<stem>.truth.json` and, when present,
/// `<stem>.master.csv`; returns the recording path.
pub fn write_trial(dir: &Path, stem: &str, trial: &SynthTrial) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{stem}.csv"));
    match &trial.raw {
        RawRecording::Teleoperated(rows) => ingest::write_teleoperated(&path, rows)?,
        RawRecording::Open(frames) => ingest::write_open(&path, frames)?,
    }
    let truth_path = dir.join(format!("{stem}.truth.json"));
    let text = serde_json::to_string_pretty(&trial.truth)?;
    fs::write(&truth_path, text + "\n").map_err(|e| Error::io(&truth_path, e))?;
    if let Some(master) = &trial.master {
        let mpath = dir.join(format!("{stem}.master.csv"));
        let mut w = csv::Writer::from_path(&mpath)?;
        w.write_record(["t", "x", "y", "z"])?;
        for (t, x) in master {
            w.write_record([t.to_string(), x[0].to_string(), x[1].to_string(), x[2].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&mpath, e))?;
    }
    Ok(path)
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Calibration

/// Pivot calibration recording: the endpoint stays at `pivot` while both
/// trackers sweep orientations within ±`spread` rad of identity.
pub fn generate_calibration(
    lever_arms: [Vec3; 2],
    pivot: Vec3,
    frames: usize,
    spread: f64,
    noise: &Noise,
    with_reference: bool,
    seed: u64,
) -> CalibrationRecording {
    let mut rng = replicate_rng(seed, stream_id("calibration"));
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let w = [
            rng.gen_range(-spread..=spread),
            rng.gen_range(-spread..=spread),
            rng.gen_range(-spread..=spread),
        ];
        let angle = rotations::norm(&w);
        let qr = if angle > 0.0 {
            UnitQuaternion::from_axis_angle(&w, angle)
        } else {
            UnitQuaternion::IDENTITY
        };
        let ql = qr.mul(&UnitQuaternion::from_axis_angle(
            &[0.0, 0.0, 1.0],
            rng.gen_range(0.0..0.5),
        ));
        out.push(TrackerFrame {
            t: k as f64 / OPEN_RATE,
            right_position: noisy_vec(&mut rng, sub(&pivot, &qr.rotate(&lever_arms[0])), noise.position),
            right_rotation: noisy_rotation(&mut rng, &qr, noise),
            left_position: noisy_vec(&mut rng, sub(&pivot, &ql.rotate(&lever_arms[1])), noise.position),
            left_rotation: noisy_rotation(&mut rng, &ql, noise),
        });
    }
    CalibrationRecording {
        frames: out,
        reference: with_reference.then(|| vec![pivot; frames]),
    }
}

// ---------------------------------------------------------------------------
// Cohorts

/// Exponential approach from `initial` (trial 1) to `asymptote` with time
/// constant `tau` trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Learning {
    pub initial: f64,
    pub asymptote: f64,
    pub tau: f64,
}

impl Learning {
    pub fn flat(v: f64) -> Learning {
        Learning {
            initial: v,
            asymptote: v,
            tau: 1.0,
        }
    }

    pub fn at(&self, trial_number: u32) -> f64 {
        self.asymptote + (self.initial - self.asymptote) * (-((trial_number - 1) as f64) / self.tau).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupProfile {
    pub participants: usize,
    /// Needle rotation rate during insertion, rad/s.
    pub insertion_rate: Learning,
    /// Transport duration, s.
    pub transport_duration: Learning,
    /// Log-scale SD of each participant's multiplicative offset.
    pub participant_spread: f64,
    /// Log-scale SD of trial-to-trial variation.
    pub trial_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortProfile {
    pub condition: Condition,
    pub trials_per_participant: u32,
    pub experienced: GroupProfile,
    pub novice: GroupProfile,
    pub exclusion_probability: f64,
    pub noise: Noise,
}

impl CohortProfile {
    /// Experienced participants rotate faster and transport quicker; novices
    /// start slow and improve across trials.
    pub fn separated(condition: Condition, experienced: usize, novice: usize, trials: u32) -> CohortProfile {
        CohortProfile {
            condition,
            trials_per_participant: trials,
            experienced: GroupProfile {
                participants: experienced,
                insertion_rate: Learning {
                    initial: 1.6,
                    asymptote: 1.8,
                    tau: trials as f64 / 4.0,
                },
                transport_duration: Learning::flat(0.9),
                participant_spread: 0.08,
                trial_spread: 0.08,
            },
            novice: GroupProfile {
                participants: novice,
                insertion_rate: Learning {
                    initial: 0.7,
                    asymptote: 1.1,
                    tau: trials as f64 / 4.0,
                },
                transport_duration: Learning {
                    initial: 1.6,
                    asymptote: 1.2,
                    tau: trials as f64 / 4.0,
                },
                participant_spread: 0.1,
                trial_spread: 0.1,
            },
            exclusion_probability: 0.02,
            noise: Noise::realistic(condition),
        }
    }

    /// Both groups drawn from the same distribution.
    pub fn null(condition: Condition, experienced: usize, novice: usize, trials: u32) -> CohortProfile {
        let mut p = CohortProfile::separated(condition, experienced, novice, trials);
        p.experienced = GroupProfile {
            participants: experienced,
            ..p.novice
        };
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.experienced.participants < 2 || self.novice.participants < 2 {
            return Err(Error::Config("cohort needs at least 2 participants per group".into()));
        }
        if self.trials_per_participant == 0 {
            return Err(Error::Config("cohort needs at least one trial per participant".into()));
        }
        if !(0.0..1.0).contains(&self.exclusion_probability) {
            return Err(Error::Config("exclusion probability outside [0, 1)".into()));
        }
        Ok(())
    }
}

/// One planned cohort trial.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTrial {
    pub meta: TrialMeta,
    pub script: TrialScript,
}

fn lognormal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        1.0
    } else {
        LogNormal::new(0.0, sd).expect("finite sd").sample(rng)
    }
}

/// Randomized script of the given condition with the supplied transport
/// duration and insertion rate.
pub fn varied_script(
    condition: Condition,
    transport_duration: f64,
    insertion_rate: f64,
    noise: Noise,
    rng: &mut ChaCha8Rng,
) -> TrialScript {
    let mut s = match condition {
        Condition::Teleoperated => TrialScript::teleoperated(),
        Condition::Open => TrialScript::open(),
    };
    let mut jitter = |v: Vec3, sd: f64| noisy_vec(rng, v, sd);
    s.start_position = jitter(s.start_position, 4.0);
    s.transport[0].target = jitter(s.transport[0].target, 2.0);
    s.transport[0].duration = transport_duration;
    s.transport_rotation.angle = rng.gen_range(0.2..0.6);
    s.hold_start = rng.gen_range(0.2..0.4);
    let angle = rng.gen_range(2.1..2.7);
    s.insertion.angle = angle;
    s.insertion.duration = angle / insertion_rate;
    s.insertion.center_offset = [0.0, 0.0, -rng.gen_range(8.0..12.0)];
    if let Profile::Plateau { .. } = s.insertion.profile {
        s.insertion.profile = Profile::Plateau {
            ramp: (0.15 / s.insertion.duration).min(0.3),
        };
    }
    s.noise = noise;
    let j2 = s.insertion_end();
    s.gripper = match condition {
        Condition::Teleoperated => Gripper::opening_at(-0.1, 0.8, 0.3, j2),
        Condition::Open => Gripper::opening_at(0.0, 0.9, 0.2, j2),
    };
    s
}

/// Plans a cohort: participant ids `E01..`/`N01..`, trial ids
/// `<condition>-<participant>-<trial>`.
pub fn plan_cohort(profile: &CohortProfile, seed: u64) -> Result<Vec<PlannedTrial>> {
    profile.validate()?;
    let mut out = Vec::new();
    for (expertise, group, tag) in [
        (Expertise::Experienced, &profile.experienced, "E"),
        (Expertise::Novice, &profile.novice, "N"),
    ] {
        for i in 1..=group.participants {
            let participant_id = format!("{tag}{i:02}");
            let mut rng = replicate_rng(seed, stream_id(&format!("participant/{participant_id}")));
            let rate_offset = lognormal(&mut rng, group.participant_spread);
            let transport_offset = lognormal(&mut rng, group.participant_spread);
            for k in 1..=profile.trials_per_participant {
                let trial_id = format!("{}-{participant_id}-{k:03}", profile.condition.as_str());
                let mut trng = replicate_rng(seed, stream_id(&format!("plan/{trial_id}")));
                let rate = group.insertion_rate.at(k) * rate_offset * lognormal(&mut trng, group.trial_spread);
                let transport =
                    group.transport_duration.at(k) * transport_offset * lognormal(&mut trng, group.trial_spread);
                let excluded = trng.gen_bool(profile.exclusion_probability);
                let script = varied_script(profile.condition, transport, rate, profile.noise, &mut trng);
                out.push(PlannedTrial {
                    meta: TrialMeta {
                        trial_id,
                        participant_id: participant_id.clone(),
                        expertise,
                        condition: profile.condition,
                        trial_number: k,
                        excluded,
                        exclusion_reason: excluded.then(|| "synthetic exclusion".to_string()),
                    },
                    script,
                });
            }
        }
    }
    out.sort_by(|a, b| a.meta.trial_id.cmp(&b.meta.trial_id));
    Ok(out)
}

/// Lever arms shared by every open-condition cohort trial.
pub fn cohort_lever_arms() -> [Vec3; 2] {
    TrialScript::open().lever_arms
}

/// Writes a planned cohort under `dir`: one recording and sidecar per trial,
/// `manifest.json` and, for open cohorts, `calibration.csv`. Returns the
/// manifest path.
pub fn write_cohort(dir: &Path, plan: &[PlannedTrial], seed: u64) -> Result<PathBuf> {
    let trials_dir = dir.join("trials");
    fs::create_dir_all(&trials_dir).map_err(|e| Error::io(&trials_dir, e))?;
    let entries: Vec<ManifestEntry> = plan
        .par_iter()
        .map(|p| {
            let trial = generate_trial(&p.script, seed, &p.meta.trial_id)?;
            write_trial(&trials_dir, &p.meta.trial_id, &trial)?;
            Ok(ManifestEntry {
                meta: p.meta.clone(),
                path: PathBuf::from("trials").join(format!("{}.csv", p.meta.trial_id)),
            })
        })
        .collect::<Result<_>>()?;
    if let Some(open) = plan.iter().find(|p| p.meta.condition == Condition::Open) {
        let noise = open.script.noise;
        let calib = generate_calibration(cohort_lever_arms(), [0.0, 0.0, 0.0], 200, 0.6, &noise, false, seed);
        ingest::write_calibration(&dir.join("calibration.csv"), &calib)?;
    }
    let manifest = dir.join("manifest.json");
    ingest::write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
