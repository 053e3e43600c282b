//! Trial recordings: file schemas, validation, open-condition endpoint
//! derivation and the preprocessing chain that produces 100 Hz trials.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, SampledSignal};
use crate::error::{Error, Result};
use crate::rotations::{
    self, add, dot, orthogonalize_sample, scale, sub, to_quaternion, Mat3, RotationMatrix, UnitQuaternion, Vec3,
};

pub const TELEOPERATED_HEADER: [&str; 17] = [
    "t", "x", "y", "z", "vx", "vy", "vz", "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33", "phi",
];

pub const OPEN_HEADER: [&str; 25] = [
    "t", "rx", "ry", "rz", "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33", "lx", "ly", "lz", "l11",
    "l12", "l13", "l21", "l22", "l23", "l31", "l32", "l33",
];

pub const REFERENCE_COLUMNS: [&str; 3] = ["ex", "ey", "ez"];

/// Minimum frames in a calibration recording.
pub const CALIBRATION_MIN_FRAMES: usize = 30;
/// Minimum largest pairwise orientation difference in a calibration recording.
pub const CALIBRATION_MIN_ROTATION: f64 = std::f64::consts::PI / 6.0;
/// Largest accepted condition number of the calibration normal matrix.
pub const CALIBRATION_MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Teleoperated,
    Open,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Teleoperated => "teleoperated",
            Condition::Open => "open",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teleoperated" | "tele" => Ok(Condition::Teleoperated),
            "open" => Ok(Condition::Open),
            other => Err(Error::Config(format!("unknown condition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expertise {
    Experienced,
    Novice,
}

impl Expertise {
    pub fn as_str(&self) -> &'static str {
        match self {
            Expertise::Experienced => "experienced",
            Expertise::Novice => "novice",
        }
    }
}

impl fmt::Display for Expertise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One teleoperated row: patient-side position (mm), online velocity (mm/s),
/// raw orientation matrix and jaw angle (rad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeleoperatedRow {
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub rotation: Mat3,
    pub phi: f64,
}

/// One open-condition frame from the right and left shaft trackers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerFrame {
    pub t: f64,
    pub right_position: Vec3,
    pub right_rotation: Mat3,
    pub left_position: Vec3,
    pub left_rotation: Mat3,
}

/// A validated recording as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum RawRecording {
    Teleoperated(Vec<TeleoperatedRow>),
    Open(Vec<TrackerFrame>),
}

impl RawRecording {
    pub fn condition(&self) -> Condition {
        match self {
            RawRecording::Teleoperated(_) => Condition::Teleoperated,
            RawRecording::Open(_) => Condition::Open,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RawRecording::Teleoperated(r) => r.len(),
            RawRecording::Open(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn times(&self) -> Vec<f64> {
        match self {
            RawRecording::Teleoperated(r) => r.iter().map(|s| s.t).collect(),
            RawRecording::Open(r) => r.iter().map(|s| s.t).collect(),
        }
    }
}

/// Calibration recording: tracker frames plus optional reference endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecording {
    pub frames: Vec<TrackerFrame>,
    pub reference: Option<Vec<Vec3>>,
}

/// One preprocessed sample on the uniform grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    pub t: f64,
    /// Instrument tip position, mm.
    pub x: Vec3,
    /// Tip velocity, mm/s.
    pub v: Vec3,
    pub q: UnitQuaternion,
    /// Opening angle, rad.
    pub phi: f64,
}

impl PoseSample {
    pub fn speed(&self) -> f64 {
        rotations::norm(&self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub trial_id: String,
    pub participant_id: String,
    pub expertise: Expertise,
    pub condition: Condition,
    pub trial_number: u32,
    #[serde(default)]
    pub excluded: bool,
    #[serde(default)]
    pub exclusion_reason: Option<String>,
}

/// Cohort manifest record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub meta: TrialMeta,
    pub path: PathBuf,
}

/// An analysis-ready trial.
///
/// For open trials `samples[..].q` is the right tracker orientation and
/// `left_orientation` carries the left tracker on the same grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub meta: TrialMeta,
    pub samples: Vec<PoseSample>,
    #[serde(default)]
    pub left_orientation: Option<Vec<UnitQuaternion>>,
}

impl Trial {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }
}

/// Constant tracker-to-endpoint offsets, each in its own tracker frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub right_lever_arm: Vec3,
    pub left_lever_arm: Vec3,
    /// Per-axis RMS of the fit residuals, mm.
    pub residual_rms: f64,
    /// Fixed pivot point when calibrated without a reference trajectory.
    pub pivot: Option<Vec3>,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Output grid rate, Hz.
    pub rate: f64,
    /// Zero-phase low-pass cutoff for position, Hz.
    pub position_cutoff: f64,
    /// Re-derive teleoperated velocity from filtered position instead of
    /// resampling the recorded channel.
    pub rederive_teleoperated_velocity: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            rate: 100.0,
            position_cutoff: 6.0,
            rederive_teleoperated_velocity: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Reading and writing

fn check_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got: Vec<&str> = got.iter().map(str::trim).collect();
    if got != want {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            detail: format!("expected header `{}`, found `{}`", want.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn parse_row(path: &Path, row: usize, record: &csv::StringRecord, width: usize) -> Result<Vec<f64>> {
    if record.len() != width {
        return Err(Error::Row {
            path: path.to_path_buf(),
            row,
            detail: format!("expected {width} fields, found {}", record.len()),
        });
    }
    record
        .iter()
        .enumerate()
        .map(|(col, field)| {
            let v: f64 = field.trim().parse().map_err(|_| Error::Row {
                path: path.to_path_buf(),
                row,
                detail: format!("column {}: `{field}` is not a number", col + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    path: path.to_path_buf(),
                    row,
                    detail: format!("column {}: non-finite value", col + 1),
                });
            }
            Ok(v)
        })
        .collect()
}

/// Reads all rows, checking the header against `want` (or `want` plus
/// `optional`). Returns the parsed rows and whether the optional columns were
/// present. Row numbers in diagnostics count data rows from 1.
fn read_table(path: &Path, want: &[&str], optional: &[&str]) -> Result<(Vec<Vec<f64>>, bool)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    let extended: Vec<&str> = want.iter().chain(optional).copied().collect();
    let with_optional = !optional.is_empty() && header.len() == extended.len();
    check_header(path, &header, if with_optional { &extended } else { want })?;
    let width = header.len();

    let mut rows = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Row {
            path: path.to_path_buf(),
            row,
            detail: e.to_string(),
        })?;
        let values = parse_row(path, row, &record, width)?;
        if values[0] <= last_t {
            return Err(Error::Row {
                path: path.to_path_buf(),
                row,
                detail: format!("timestamp {} does not increase (previous {last_t})", values[0]),
            });
        }
        last_t = values[0];
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok((rows, with_optional))
}

fn vec3(v: &[f64]) -> Vec3 {
    [v[0], v[1], v[2]]
}

fn mat3(v: &[f64]) -> Mat3 {
    [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]
}

fn frame_from_row(v: &[f64]) -> TrackerFrame {
    TrackerFrame {
        t: v[0],
        right_position: vec3(&v[1..4]),
        right_rotation: mat3(&v[4..13]),
        left_position: vec3(&v[13..16]),
        left_rotation: mat3(&v[16..25]),
    }
}

/// Loads and validates one trial file in the given schema.
pub fn load_trial(path: &Path, condition: Condition) -> Result<RawRecording> {
    match condition {
        Condition::Teleoperated => {
            let (rows, _) = read_table(path, &TELEOPERATED_HEADER, &[])?;
            Ok(RawRecording::Teleoperated(
                rows.iter()
                    .map(|v| TeleoperatedRow {
                        t: v[0],
                        position: vec3(&v[1..4]),
                        velocity: vec3(&v[4..7]),
                        rotation: mat3(&v[7..16]),
                        phi: v[16],
                    })
                    .collect(),
            ))
        }
        Condition::Open => {
            let (rows, _) = read_table(path, &OPEN_HEADER, &[])?;
            Ok(RawRecording::Open(rows.iter().map(|v| frame_from_row(v)).collect()))
        }
    }
}

/// Loads a calibration recording (open schema, optional `ex,ey,ez`).
pub fn load_calibration(path: &Path) -> Result<CalibrationRecording> {
    let (rows, with_reference) = read_table(path, &OPEN_HEADER, &REFERENCE_COLUMNS)?;
    Ok(CalibrationRecording {
        frames: rows.iter().map(|v| frame_from_row(v)).collect(),
        reference: with_reference.then(|| rows.iter().map(|v| vec3(&v[25..28])).collect()),
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(std::io::BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_fields(out: &mut impl Write, path: &Path, fields: &[f64]) -> Result<()> {
    let line = fields.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

pub fn write_teleoperated(path: &Path, rows: &[TeleoperatedRow]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{}", TELEOPERATED_HEADER.join(",")).map_err(|e| Error::io(path, e))?;
    for r in rows {
        let mut f = vec![r.t];
        f.extend(r.position);
        f.extend(r.velocity);
        f.extend(r.rotation.iter().flatten());
        f.push(r.phi);
        write_fields(&mut out, path, &f)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn frame_fields(fr: &TrackerFrame) -> Vec<f64> {
    let mut f = vec![fr.t];
    f.extend(fr.right_position);
    f.extend(fr.right_rotation.iter().flatten());
    f.extend(fr.left_position);
    f.extend(fr.left_rotation.iter().flatten());
    f
}

pub fn write_open(path: &Path, frames: &[TrackerFrame]) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "{}", OPEN_HEADER.join(",")).map_err(|e| Error::io(path, e))?;
    for fr in frames {
        write_fields(&mut out, path, &frame_fields(fr))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_calibration(path: &Path, recording: &CalibrationRecording) -> Result<()> {
    let mut out = create(path)?;
    let mut header: Vec<&str> = OPEN_HEADER.to_vec();
    if recording.reference.is_some() {
        header.extend(REFERENCE_COLUMNS);
    }
    writeln!(out, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for (k, fr) in recording.frames.iter().enumerate() {
        let mut f = frame_fields(fr);
        if let Some(reference) = &recording.reference {
            f.extend(reference[k]);
        }
        write_fields(&mut out, path, &f)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a cohort manifest; relative trial paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ids = BTreeSet::new();
    let mut numbers = BTreeSet::new();
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        if !ids.insert(e.meta.trial_id.clone()) {
            return Err(Error::Data(format!("duplicate trial_id `{}`", e.meta.trial_id)));
        }
        let key = (e.meta.participant_id.clone(), e.meta.condition, e.meta.trial_number);
        if !numbers.insert(key) {
            return Err(Error::Data(format!(
                "trial_number {} repeated for participant `{}` ({})",
                e.meta.trial_number, e.meta.participant_id, e.meta.condition
            )));
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, entries)?;
    writeln!(out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Calibration

/// Largest pairwise orientation difference in a stream, radians.
fn rotation_coverage(orientations: &[UnitQuaternion]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in orientations.iter().enumerate() {
        for b in &orientations[i + 1..] {
            best = best.max(rotations::rotation_angle(a, b));
        }
    }
    best
}

fn orthogonal_frames(frames: &[TrackerFrame]) -> Result<Vec<(RotationMatrix, RotationMatrix)>> {
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            Ok((
                orthogonalize_sample(&f.right_rotation, Some(k))?,
                orthogonalize_sample(&f.left_rotation, Some(k))?,
            ))
        })
        .collect()
}

/// Least-squares lever arms from a calibration recording.
///
/// With a reference endpoint trajectory each tracker is fitted on its own,
/// minimizing `‖x_s + R_s r_s − x_ref‖`. Without one, the endpoint is assumed
/// to pivot about a fixed point `p` and the fit minimizes
/// `‖x_R + R_R r_R − p‖² + ‖x_L + R_L r_L − p‖²` jointly over `r_R, r_L, p`,
/// which also forces the two trackers' endpoint estimates to coincide.
pub fn calibrate_endpoint(recording: &CalibrationRecording) -> Result<CalibrationModel> {
    let frames = &recording.frames;
    if frames.len() < CALIBRATION_MIN_FRAMES {
        return Err(Error::IllConditioned(format!(
            "{} frames, need at least {CALIBRATION_MIN_FRAMES}",
            frames.len()
        )));
    }
    let rots = orthogonal_frames(frames)?;
    let right_q: Vec<UnitQuaternion> = rots.iter().map(|(r, _)| to_quaternion(r)).collect();
    let coverage = rotation_coverage(&right_q);
    if coverage < CALIBRATION_MIN_ROTATION {
        return Err(Error::IllConditioned(format!(
            "rotation coverage {:.2} deg below {:.0} deg",
            coverage.to_degrees(),
            CALIBRATION_MIN_ROTATION.to_degrees()
        )));
    }

    match &recording.reference {
        Some(reference) => {
            if reference.len() != frames.len() {
                return Err(Error::Data("reference length differs from frame count".into()));
            }
            let fit = |pick: fn(&TrackerFrame, &(RotationMatrix, RotationMatrix)) -> (Vec3, RotationMatrix)| {
                let rows: Vec<(RotationMatrix, Vec3)> = frames
                    .iter()
                    .zip(&rots)
                    .zip(reference)
                    .map(|((f, r), e)| {
                        let (x, rot) = pick(f, r);
                        (rot, sub(e, &x))
                    })
                    .collect();
                let mut ata = DMatrix::zeros(3, 3);
                let mut atb = DVector::zeros(3);
                for (rot, b) in &rows {
                    accumulate(&mut ata, &mut atb, &[(0, rot.as_array(), 1.0)], b);
                }
                let sol = solve_normal(&ata, &atb)?;
                let lever = [sol[0], sol[1], sol[2]];
                let sq: f64 = rows
                    .iter()
                    .map(|(rot, b)| {
                        let r = sub(&rot.transform(&lever), b);
                        dot(&r, &r)
                    })
                    .sum();
                Ok::<_, Error>((lever, sq))
            };
            let (right, sq_r) = fit(|f, r| (f.right_position, r.0))?;
            let (left, sq_l) = fit(|f, r| (f.left_position, r.1))?;
            Ok(CalibrationModel {
                right_lever_arm: right,
                left_lever_arm: left,
                residual_rms: ((sq_r + sq_l) / (6 * frames.len()) as f64).sqrt(),
                pivot: None,
                frames: frames.len(),
            })
        }
        None => {
            const NEG_I: Mat3 = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
            let mut ata = DMatrix::zeros(9, 9);
            let mut atb = DVector::zeros(9);
            for (f, (rr, rl)) in frames.iter().zip(&rots) {
                accumulate(
                    &mut ata,
                    &mut atb,
                    &[(0, rr.as_array(), 1.0), (6, &NEG_I, 1.0)],
                    &scale(&f.right_position, -1.0),
                );
                accumulate(
                    &mut ata,
                    &mut atb,
                    &[(3, rl.as_array(), 1.0), (6, &NEG_I, 1.0)],
                    &scale(&f.left_position, -1.0),
                );
            }
            let sol = solve_normal(&ata, &atb)?;
            let right = [sol[0], sol[1], sol[2]];
            let left = [sol[3], sol[4], sol[5]];
            let pivot = [sol[6], sol[7], sol[8]];
            let sq: f64 = frames
                .iter()
                .zip(&rots)
                .map(|(f, (rr, rl))| {
                    let a = sub(&add(&f.right_position, &rr.transform(&right)), &pivot);
                    let b = sub(&add(&f.left_position, &rl.transform(&left)), &pivot);
                    dot(&a, &a) + dot(&b, &b)
                })
                .sum();
            Ok(CalibrationModel {
                right_lever_arm: right,
                left_lever_arm: left,
                residual_rms: (sq / (6 * frames.len()) as f64).sqrt(),
                pivot: Some(pivot),
                frames: frames.len(),
            })
        }
    }
}

/// Adds one 3-row block `Σ_blocks M·u_block = b` to the normal equations.
fn accumulate(ata: &mut DMatrix<f64>, atb: &mut DVector<f64>, blocks: &[(usize, &Mat3, f64)], b: &Vec3) {
    let n = ata.nrows();
    for row in 0..3 {
        let mut a = vec![0.0; n];
        for (offset, m, s) in blocks {
            for c in 0..3 {
                a[offset + c] += s * m[row][c];
            }
        }
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            atb[i] += a[i] * b[row];
            for j in 0..n {
                ata[(i, j)] += a[i] * a[j];
            }
        }
    }
}

fn solve_normal(ata: &DMatrix<f64>, atb: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(ata.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= CALIBRATION_MAX_CONDITION) {
        return Err(Error::IllConditioned(format!(
            "normal matrix condition number {cond:e} exceeds {CALIBRATION_MAX_CONDITION:e}"
        )));
    }
    ata.clone()
        .cholesky()
        .map(|c| c.solve(atb))
        .ok_or_else(|| Error::IllConditioned("normal matrix not positive definite".into()))
}

// ---------------------------------------------------------------------------
// Open-condition derivation

/// Open-condition poses at the raw tracker rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenPoses {
    /// Endpoint, opening angle and right tracker orientation; velocity is zero
    /// until preprocessing differentiates the filtered endpoint.
    pub samples: Vec<PoseSample>,
    pub left_orientation: Vec<UnitQuaternion>,
}

/// Driver endpoint (midpoint of both trackers' lever-arm projections) and
/// opening angle `acos(x̂_R · x̂_L)` for every frame.
pub fn derive_open_pose(frames: &[TrackerFrame], calib: &CalibrationModel) -> Result<OpenPoses> {
    let mut samples = Vec::with_capacity(frames.len());
    let mut left_orientation = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        let rr = orthogonalize_sample(&f.right_rotation, Some(k))?;
        let rl = orthogonalize_sample(&f.left_rotation, Some(k))?;
        let tip_r = add(&f.right_position, &rr.transform(&calib.right_lever_arm));
        let tip_l = add(&f.left_position, &rl.transform(&calib.left_lever_arm));
        let cos_phi = dot(&rr.x_axis(), &rl.x_axis()).clamp(-1.0, 1.0);
        samples.push(PoseSample {
            t: f.t,
            x: scale(&add(&tip_r, &tip_l), 0.5),
            v: [0.0; 3],
            q: to_quaternion(&rr),
            phi: cos_phi.acos(),
        });
        left_orientation.push(to_quaternion(&rl));
    }
    Ok(OpenPoses {
        samples,
        left_orientation,
    })
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Output of [`preprocess`].
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub samples: Vec<PoseSample>,
    pub left_orientation: Option<Vec<UnitQuaternion>>,
}

fn resample_channel(times: &[f64], values: Vec<f64>, query: &[f64]) -> Result<Vec<f64>> {
    let signal = SampledSignal::new(times.to_vec(), values)?;
    Ok(dsp::pchip_interpolate(&signal, query)?.into_values())
}

fn resample_vec3(times: &[f64], values: &[Vec3], query: &[f64]) -> Result<Vec<Vec3>> {
    let channels: Vec<Vec<f64>> = (0..3)
        .map(|axis| resample_channel(times, values.iter().map(|v| v[axis]).collect(), query))
        .collect::<Result<_>>()?;
    Ok((0..query.len())
        .map(|k| [channels[0][k], channels[1][k], channels[2][k]])
        .collect())
}

/// SLERP between the bracketing raw orientations at each query time.
pub fn resample_orientation(times: &[f64], q: &[UnitQuaternion], query: &[f64]) -> Result<Vec<UnitQuaternion>> {
    let n = times.len();
    if n < 2 || q.len() != n {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    query
        .iter()
        .map(|&t| {
            if !(t >= times[0] && t <= times[n - 1]) {
                return Err(Error::OutOfRange {
                    time: t,
                    start: times[0],
                    end: times[n - 1],
                });
            }
            let k = times.partition_point(|&tk| tk <= t).clamp(1, n - 1) - 1;
            if t == times[k] {
                return Ok(q[k]);
            }
            let u = (t - times[k]) / (times[k + 1] - times[k]);
            Ok(rotations::slerp(&q[k], &q[k + 1], u))
        })
        .collect()
}

fn filter_positions(x: &[Vec3], rate: f64, cutoff: f64) -> Result<Vec<Vec3>> {
    let channels: Vec<Vec<f64>> = (0..3)
        .map(|axis| {
            let c: Vec<f64> = x.iter().map(|v| v[axis]).collect();
            dsp::filtfilt_butter2(&c, rate, cutoff)
        })
        .collect::<Result<_>>()?;
    Ok((0..x.len())
        .map(|k| [channels[0][k], channels[1][k], channels[2][k]])
        .collect())
}

fn differentiate_positions(x: &[Vec3], rate: f64) -> Result<Vec<Vec3>> {
    let channels: Vec<Vec<f64>> = (0..3)
        .map(|axis| {
            let c: Vec<f64> = x.iter().map(|v| v[axis]).collect();
            dsp::differentiate_values(&c, 1.0 / rate)
        })
        .collect::<Result<_>>()?;
    Ok((0..x.len())
        .map(|k| [channels[0][k], channels[1][k], channels[2][k]])
        .collect())
}

/// Runs the preprocessing chain on a raw recording.
///
/// 1. Orthogonalize each rotation matrix and convert it to a quaternion
///    (open trials first derive endpoint and opening angle via `calib`).
/// 2. Resample onto a uniform grid: PCHIP for position, velocity and opening
///    angle, SLERP for orientation.
/// 3. Zero-phase low-pass the position.
/// 4. Open trials (and teleoperated ones when configured) take velocity from
///    the derivative of the filtered position.
pub fn preprocess(
    raw: &RawRecording,
    config: &PreprocessConfig,
    calib: Option<&CalibrationModel>,
) -> Result<Preprocessed> {
    let times = raw.times();
    if times.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: times.len(),
        });
    }
    let grid = dsp::uniform_grid(times[0], times[times.len() - 1], config.rate)?;
    let end = times[times.len() - 1];
    let query: Vec<f64> = grid.iter().map(|&t| t.min(end)).collect();

    let (x, recorded_v, q, phi, left) = match raw {
        RawRecording::Teleoperated(rows) => {
            let q: Vec<UnitQuaternion> = rows
                .iter()
                .enumerate()
                .map(|(k, r)| Ok(to_quaternion(&orthogonalize_sample(&r.rotation, Some(k))?)))
                .collect::<Result<_>>()?;
            let x: Vec<Vec3> = rows.iter().map(|r| r.position).collect();
            let v: Vec<Vec3> = rows.iter().map(|r| r.velocity).collect();
            (
                resample_vec3(&times, &x, &query)?,
                Some(resample_vec3(&times, &v, &query)?),
                resample_orientation(&times, &q, &query)?,
                resample_channel(&times, rows.iter().map(|r| r.phi).collect(), &query)?,
                None,
            )
        }
        RawRecording::Open(frames) => {
            let calib = calib.ok_or_else(|| Error::Config("open-condition trials need a calibration model".into()))?;
            let poses = derive_open_pose(frames, calib)?;
            let x: Vec<Vec3> = poses.samples.iter().map(|s| s.x).collect();
            let q: Vec<UnitQuaternion> = poses.samples.iter().map(|s| s.q).collect();
            (
                resample_vec3(&times, &x, &query)?,
                None,
                resample_orientation(&times, &q, &query)?,
                resample_channel(&times, poses.samples.iter().map(|s| s.phi).collect(), &query)?,
                Some(resample_orientation(&times, &poses.left_orientation, &query)?),
            )
        }
    };

    let x = filter_positions(&x, config.rate, config.position_cutoff)?;
    let v = match recorded_v {
        Some(v) if !config.rederive_teleoperated_velocity => v,
        _ => differentiate_positions(&x, config.rate)?,
    };

    let samples = grid
        .iter()
        .enumerate()
        .map(|(k, &t)| PoseSample {
            t,
            x: x[k],
            v: v[k],
            q: q[k],
            phi: phi[k],
        })
        .collect();
    Ok(Preprocessed {
        samples,
        left_orientation: left,
    })
}

/// Loads and preprocesses one manifest entry.
pub fn ingest_trial(
    entry: &ManifestEntry,
    config: &PreprocessConfig,
    calib: Option<&CalibrationModel>,
) -> Result<Trial> {
    let raw = load_trial(&entry.path, entry.meta.condition)?;
    let pre = preprocess(&raw, config, calib)?;
    Ok(Trial {
        meta: entry.meta.clone(),
        samples: pre.samples,
        left_orientation: pre.left_orientation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;
    use tempfile::tempdir;

    const ROW: &str = "0,1,2,3,0,0,0,1,0,0,0,1,0,0,0,1,0";

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_three_teleoperated_rows() {
        let dir = tempdir().unwrap();
        let text = format!(
            "{}\n{ROW}\n{}\n{}\n",
            TELEOPERATED_HEADER.join(","),
            ROW.replacen('0', "0.001", 1),
            ROW.replacen('0', "0.002", 1)
        );
        let p = write(dir.path(), "t.csv", &text);
        let raw = load_trial(&p, Condition::Teleoperated).unwrap();
        assert_eq!(raw.len(), 3);
    }

    #[test]
    fn names_the_row_with_nan() {
        let dir = tempdir().unwrap();
        let text = format!(
            "{}\n{ROW}\n0.001,NaN,2,3,0,0,0,1,0,0,0,1,0,0,0,1,0\n",
            TELEOPERATED_HEADER.join(",")
        );
        let p = write(dir.path(), "t.csv", &text);
        match load_trial(&p, Condition::Teleoperated) {
            Err(Error::Row { row: 2, .. }) => {}
            other => panic!("expected row 2 error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_header_mismatch_empty_and_regression() {
        let dir = tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            &format!("{}\n{ROW}\n", TELEOPERATED_HEADER.join(",")),
        );
        assert!(matches!(load_trial(&p, Condition::Open), Err(Error::Schema { .. })));

        let p = write(dir.path(), "b.csv", &format!("{}\n", TELEOPERATED_HEADER.join(",")));
        assert!(matches!(
            load_trial(&p, Condition::Teleoperated),
            Err(Error::Empty { .. })
        ));

        let text = format!("{}\n{ROW}\n{ROW}\n", TELEOPERATED_HEADER.join(","));
        let p = write(dir.path(), "c.csv", &text);
        assert!(matches!(
            load_trial(&p, Condition::Teleoperated),
            Err(Error::Row { row: 2, .. })
        ));
    }

    fn frame(t: f64, right: Mat3, left: Mat3) -> TrackerFrame {
        TrackerFrame {
            t,
            right_position: [0.0; 3],
            right_rotation: right,
            left_position: [0.0; 3],
            left_rotation: left,
        }
    }

    fn calib() -> CalibrationModel {
        CalibrationModel {
            right_lever_arm: [0.0; 3],
            left_lever_arm: [0.0; 3],
            residual_rms: 0.0,
            pivot: None,
            frames: 0,
        }
    }

    #[test]
    fn opening_angle_from_tracker_axes() {
        let id = *RotationMatrix::IDENTITY.as_array();
        let quarter = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let poses = derive_open_pose(&[frame(0.0, id, quarter), frame(0.01, id, id)], &calib()).unwrap();
        assert!((poses.samples[0].phi - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(poses.samples[1].phi, 0.0);
    }

    #[test]
    fn zero_rotation_calibration_is_ill_conditioned() {
        let id = *RotationMatrix::IDENTITY.as_array();
        let frames: Vec<TrackerFrame> = (0..40).map(|k| frame(k as f64, id, id)).collect();
        let rec = CalibrationRecording {
            frames,
            reference: None,
        };
        assert!(matches!(calibrate_endpoint(&rec), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn constant_pose_preprocesses_to_constant_trial() {
        let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let frames: Vec<TrackerFrame> = (0..240)
            .map(|k| TrackerFrame {
                t: k as f64 / 120.0,
                right_position: [10.0, -5.0, 2.0],
                right_rotation: rot,
                left_position: [12.0, -5.0, 2.0],
                left_rotation: rot,
            })
            .collect();
        let out = preprocess(
            &RawRecording::Open(frames),
            &PreprocessConfig::default(),
            Some(&calib()),
        )
        .unwrap();
        assert_eq!(out.samples.len(), 200);
        for s in &out.samples {
            assert!((s.x[0] - 11.0).abs() < 1e-9);
            assert!(s.speed() < 1e-9);
            assert!(rotations::rotation_angle(&s.q, &out.samples[0].q) < 1e-12);
        }
    }
}
