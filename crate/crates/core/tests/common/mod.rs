//! Shared helpers and independent oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use needlemetrics::ingest::{self, CalibrationModel, Condition, Expertise, PreprocessConfig, Trial, TrialMeta};
use needlemetrics::rotations::Mat3;
use needlemetrics::segmentation::{self, OverrideEntry, SegmentBoundaries};
use needlemetrics::stats::ParticipantCells;
use needlemetrics::synth::{Noise, SynthTrial, TrialScript};

pub fn meta(trial_id: &str, condition: Condition) -> TrialMeta {
    TrialMeta {
        trial_id: trial_id.into(),
        participant_id: "P01".into(),
        expertise: Expertise::Novice,
        condition,
        trial_number: 1,
        excluded: false,
        exclusion_reason: None,
    }
}

pub fn noiseless(mut script: TrialScript) -> TrialScript {
    script.noise = Noise::default();
    script
}

/// Preprocesses a generated trial with its script's exact lever arms.
pub fn ingest_synth(id: &str, synth: &SynthTrial) -> Trial {
    let script = &synth.truth.script;
    let calib = CalibrationModel {
        right_lever_arm: script.lever_arms[0],
        left_lever_arm: script.lever_arms[1],
        residual_rms: 0.0,
        pivot: None,
        frames: 0,
    };
    let pre = ingest::preprocess(&synth.raw, &PreprocessConfig::default(), Some(&calib)).expect("preprocess");
    Trial {
        meta: meta(id, script.condition),
        samples: pre.samples,
        left_orientation: pre.left_orientation,
    }
}

/// Ground-truth boundaries routed through the manual-override path.
pub fn truth_boundaries(trial: &Trial, synth: &SynthTrial) -> SegmentBoundaries {
    let entry = OverrideEntry {
        trial_id: trial.meta.trial_id.clone(),
        j1_time_s: synth.truth.true_j1_s,
        j2_time_s: synth.truth.true_j2_s,
    };
    segmentation::override_boundaries(&trial.times(), &entry).expect("truth boundaries inside the trial")
}

// ---------------------------------------------------------------------------
// Nearest rotation by direct search

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Rodrigues rotation about coordinate axis `axis` by `angle`.
fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut r = [[0.0; 3]; 3];
    r[axis][axis] = 1.0;
    r[i][i] = c;
    r[j][j] = c;
    r[i][j] = -s;
    r[j][i] = s;
    r
}

fn alignment(r: &Mat3, m: &Mat3) -> f64 {
    (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| r[i][j] * m[i][j])
        .sum()
}

/// Rotation minimizing the Frobenius distance to `m`, found by maximizing
/// `tr(Rᵀ M)` with a shrinking-step coordinate search over left-multiplied
/// elementary rotations from several starts. No decomposition involved.
pub fn nearest_rotation_search(m: &Mat3) -> Mat3 {
    let starts: Vec<Mat3> = (0..3)
        .flat_map(|a| [0.0, 2.0].map(move |t| axis_rotation(a, t)))
        .collect();
    let mut best: Option<(f64, Mat3)> = None;
    for start in starts {
        let mut r = start;
        let mut score = alignment(&r, m);
        let mut step = 0.5;
        while step > 1e-12 {
            let mut improved = false;
            for axis in 0..3 {
                for sign in [1.0, -1.0] {
                    let cand = matmul(&axis_rotation(axis, sign * step), &r);
                    let s = alignment(&cand, m);
                    if s > score {
                        r = cand;
                        score = s;
                        improved = true;
                    }
                }
            }
            if !improved {
                step /= 2.0;
            }
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, r));
        }
    }
    best.expect("at least one start").1
}

// ---------------------------------------------------------------------------
// Mixed ANOVA by model comparison

fn rss(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let beta = x.clone().svd(true, true).solve(y, 1e-12).expect("least squares");
    (y - x * beta).norm_squared()
}

fn drop_column(x: &DMatrix<f64>, c: usize) -> DMatrix<f64> {
    x.clone().remove_column(c)
}

/// F values (expertise, trial, interaction) of a 2×2 mixed design, each as
/// the drop in residual sum of squares when the effect-coded term is removed
/// from a least-squares fit.
///
/// Within-subject terms come from the observation-level model with one
/// indicator per participant; the between-subject term from the model of
/// participant totals.
pub fn anova_by_regression(cells: &[ParticipantCells]) -> [f64; 3] {
    let n = cells.len();
    let code = |c: &ParticipantCells| {
        if c.expertise == Expertise::Experienced {
            1.0
        } else {
            -1.0
        }
    };
    // observation model: [subject dummies | trial | group×trial]
    let mut x = DMatrix::<f64>::zeros(2 * n, n + 2);
    let mut y = DVector::<f64>::zeros(2 * n);
    for (i, c) in cells.iter().enumerate() {
        for (k, (value, t)) in [(c.early, -1.0), (c.late, 1.0)].into_iter().enumerate() {
            let row = 2 * i + k;
            x[(row, i)] = 1.0;
            x[(row, n)] = t;
            x[(row, n + 1)] = t * code(c);
            y[row] = value;
        }
    }
    let rss_full = rss(&x, &y);
    let ms_within = rss_full / (n - 2) as f64;
    let f_trial = (rss(&drop_column(&x, n), &y) - rss_full) / ms_within;
    let f_inter = (rss(&drop_column(&x, n + 1), &y) - rss_full) / ms_within;

    // between model on per-participant sums (each sum carries two observations)
    let mut xb = DMatrix::<f64>::zeros(n, 2);
    let mut yb = DVector::<f64>::zeros(n);
    for (i, c) in cells.iter().enumerate() {
        xb[(i, 0)] = 1.0;
        xb[(i, 1)] = code(c);
        yb[i] = (c.early + c.late) / 2.0;
    }
    let rss_b = rss(&xb, &yb);
    let f_exp = (rss(&drop_column(&xb, 1), &yb) - rss_b) / (rss_b / (n - 2) as f64);
    [f_exp, f_trial, f_inter]
}
