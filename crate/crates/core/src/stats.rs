//! Cohort statistics: normality screening, transforms, early/late averaging,
//! the 2×2 mixed-design ANOVA (expertise between, early/late within),
//! Bonferroni post-hoc comparisons and bootstrap intervals.
//!
//! Every Monte-Carlo routine draws replicate `i` from its own ChaCha stream
//! (`seed`, stream `i`), so results do not depend on the thread schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::ingest::{Condition, Expertise};
use crate::metrics::{MetricRecord, Segment};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_WINDOW: u32 = 10;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const DEFAULT_LILLIEFORS_REPLICATES: usize = 10_000;
pub const LILLIEFORS_MIN_LEN: usize = 5;

/// RNG for replicate `index` of a seeded Monte-Carlo run.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn mean(x: &[f64]) -> f64 {
    // shifting by the first value keeps a constant sample exactly constant
    let x0 = x[0];
    x0 + x.iter().map(|v| v - x0).sum::<f64>() / x.len() as f64
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Linear-interpolation quantile of sorted data, `q` in [0, 1].
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

// ---------------------------------------------------------------------------
// Normality

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lilliefors {
    pub statistic: f64,
    pub p: f64,
}

/// Kolmogorov-Smirnov distance between the sample and a normal with the
/// sample's mean and standard deviation. Sorts `x` in place.
fn ks_normal_statistic(x: &mut [f64]) -> Option<f64> {
    let n = x.len() as f64;
    let m = mean(x);
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return None;
    }
    let sd = var.sqrt();
    x.sort_by(f64::total_cmp);
    let mut d: f64 = 0.0;
    for (i, v) in x.iter().enumerate() {
        let f = normal_cdf((v - m) / sd);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Some(d)
}

/// Lilliefors normality test with a Monte-Carlo null of `replicates` draws.
pub fn lilliefors(values: &[f64], replicates: usize, seed: u64) -> Result<Lilliefors> {
    let n = values.len();
    if n < LILLIEFORS_MIN_LEN {
        return Err(Error::Stats(format!(
            "normality test needs at least {LILLIEFORS_MIN_LEN} values, got {n}"
        )));
    }
    if replicates == 0 {
        return Err(Error::Config("normality test needs at least one replicate".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats("normality test on non-finite values".into()));
    }
    let statistic = ks_normal_statistic(&mut values.to_vec())
        .ok_or_else(|| Error::Stats("normality test on constant values".into()))?;
    let exceed: usize = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(seed, i);
            let mut sim: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            usize::from(ks_normal_statistic(&mut sim).is_some_and(|d| d >= statistic))
        })
        .sum();
    Ok(Lilliefors {
        statistic,
        p: (exceed + 1) as f64 / (replicates + 1) as f64,
    })
}

// ---------------------------------------------------------------------------
// Transforms

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    Log,
}

impl Transform {
    pub fn apply(&self, v: f64) -> Result<f64> {
        match self {
            Transform::None => Ok(v),
            Transform::Log if v > 0.0 => Ok(v.ln()),
            Transform::Log => Err(Error::TransformInfeasible(v)),
        }
    }

    pub fn apply_all(&self, values: &[f64]) -> Result<Vec<f64>> {
        values.iter().map(|&v| self.apply(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    None,
    Log,
    /// Raw values look non-normal but some are not positive.
    LogInfeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformAdvice {
    pub raw: Lilliefors,
    pub log: Option<Lilliefors>,
    pub recommendation: Recommendation,
}

fn residuals(cells: &[Vec<f64>]) -> Vec<f64> {
    cells
        .iter()
        .filter(|c| !c.is_empty())
        .flat_map(|c| {
            let m = mean(c);
            c.iter().map(move |v| v - m)
        })
        .collect()
}

/// Screens the within-cell residuals on the raw and log scales; log is
/// recommended when only the raw residuals reject normality at `alpha`.
pub fn select_transform(cells: &[Vec<f64>], alpha: f64, replicates: usize, seed: u64) -> Result<TransformAdvice> {
    let raw = lilliefors(&residuals(cells), replicates, seed)?;
    let positive = cells.iter().flatten().all(|&v| v > 0.0);
    let log = if positive {
        let logged: Vec<Vec<f64>> = cells
            .iter()
            .map(|c| Transform::Log.apply_all(c))
            .collect::<Result<_>>()?;
        Some(lilliefors(&residuals(&logged), replicates, seed)?)
    } else {
        None
    };
    let recommendation = match (raw.p < alpha, log) {
        (false, _) => Recommendation::None,
        (true, None) => Recommendation::LogInfeasible,
        (true, Some(l)) if l.p >= alpha => Recommendation::Log,
        (true, Some(_)) => Recommendation::None,
    };
    Ok(TransformAdvice {
        raw,
        log,
        recommendation,
    })
}

// ---------------------------------------------------------------------------
// Early / late windows

/// One participant's per-trial values; `None` marks an excluded or removed trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantSeries {
    pub participant_id: String,
    pub expertise: Expertise,
    pub values: BTreeMap<u32, Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Early,
    Late,
}

/// Means over trial numbers `1..=window` and
/// `session_length - window + 1..=session_length`.
pub fn early_late(
    series: &ParticipantSeries,
    window: u32,
    session_length: u32,
) -> std::result::Result<(f64, f64), Window> {
    let late_start = session_length.saturating_sub(window) + 1;
    let avg = |lo: u32, hi: u32| {
        let v: Vec<f64> = series.values.range(lo..=hi).filter_map(|(_, v)| *v).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let early = avg(1, window).ok_or(Window::Early)?;
    let late = avg(late_start, session_length).ok_or(Window::Late)?;
    Ok((early, late))
}

// ---------------------------------------------------------------------------
// Mixed-design ANOVA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantCells {
    pub participant_id: String,
    pub expertise: Expertise,
    pub early: f64,
    pub late: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub ss: f64,
    pub ss_error: f64,
    pub df_num: u32,
    pub df_den: u32,
    pub f: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "Exp-Nov Early")]
    ExpNovEarly,
    #[serde(rename = "Exp-Nov Late")]
    ExpNovLate,
    #[serde(rename = "Late-Early Exp")]
    LateEarlyExp,
    #[serde(rename = "Late-Early Nov")]
    LateEarlyNov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostHoc {
    pub comparison: Comparison,
    pub difference: f64,
    pub t: f64,
    pub df: u32,
    pub p: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSizes {
    /// Difference of unweighted marginal means, experienced minus novice.
    pub exp_minus_nov: f64,
    pub late_minus_early: f64,
    pub exp_minus_nov_early: f64,
    pub exp_minus_nov_late: f64,
    pub late_minus_early_exp: f64,
    pub late_minus_early_nov: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub n_experienced: usize,
    pub n_novice: usize,
    pub expertise: Effect,
    pub trial: Effect,
    pub interaction: Effect,
    pub effect_sizes: EffectSizes,
    pub post_hoc: Vec<PostHoc>,
    /// Whether the per-cell comparisons should be read (interaction significant).
    pub simple_effects_reported: bool,
}

fn effect(ss: f64, ss_error: f64, df_den: u32) -> Effect {
    let (f, p) = if ss <= 0.0 {
        (0.0, 1.0)
    } else if ss_error <= 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = ss / (ss_error / df_den as f64);
        let dist = FisherSnedecor::new(1.0, df_den as f64).expect("positive degrees of freedom");
        (f, dist.sf(f).clamp(0.0, 1.0))
    };
    Effect {
        ss,
        ss_error,
        df_num: 1,
        df_den,
        f,
        p,
    }
}

fn t_two_sided(t: f64, df: u32) -> f64 {
    if t.is_nan() {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

fn safe_ratio(num: f64, se: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if se > 0.0 {
        num / se
    } else {
        num.signum() * f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bonferroni {
    pub p_adjusted: f64,
    pub significant: bool,
}

/// Bonferroni decision for one of `m` comparisons at family level `alpha`.
pub fn bonferroni(p: f64, m: usize, alpha: f64) -> Bonferroni {
    let m = m.max(1) as f64;
    Bonferroni {
        p_adjusted: (m * p).min(1.0),
        significant: p < alpha / m,
    }
}

struct Group {
    n: f64,
    early: f64,
    late: f64,
    subj: f64,
    diff: f64,
}

/// Two-way mixed ANOVA on a participant × {early, late} table.
///
/// Sums of squares, with subject mean `m_i = (e_i + l_i)/2`, difference
/// `d_i = l_i - e_i` and group sizes `n_g`:
///
/// * expertise: `2 Σ n_g (m̄_g - m̄)²` against `2 ΣΣ (m_i - m̄_g)²`;
/// * trial: `2 L² / (1/n_1 + 1/n_2)` with `L = (d̄_1 + d̄_2)/2`;
/// * interaction: `(d̄_1 - d̄_2)² / (2 (1/n_1 + 1/n_2))`;
///
/// the last two against `½ ΣΣ (d_i - d̄_g)²`. Trial and interaction use the
/// unweighted (Type III) contrasts; the between-subject error and expertise
/// terms are the one-way ANOVA on subject means, which is Type III as well
/// for a single between factor. All effects have df (1, N - 2).
pub fn mixed_anova_2x2(cells: &[ParticipantCells], alpha: f64) -> Result<AnovaResult> {
    if cells.iter().any(|c| !c.early.is_finite() || !c.late.is_finite()) {
        return Err(Error::Stats("non-finite cell value".into()));
    }
    // ANOVA is shift invariant; centering on one observation keeps
    // constant tables exactly constant
    let origin = cells.first().map_or(0.0, |c| c.early);
    let split = |e: Expertise| -> Vec<(f64, f64)> {
        cells
            .iter()
            .filter(|c| c.expertise == e)
            .map(|c| (c.early - origin, c.late - origin))
            .collect()
    };
    let groups_raw = [split(Expertise::Experienced), split(Expertise::Novice)];
    if let Some(g) = groups_raw.iter().find(|g| g.len() < 2) {
        return Err(Error::Stats(format!(
            "underdetermined design: an expertise group has {} participant(s), need at least 2",
            g.len()
        )));
    }
    let groups: Vec<Group> = groups_raw
        .iter()
        .map(|g| {
            let early: Vec<f64> = g.iter().map(|c| c.0).collect();
            let late: Vec<f64> = g.iter().map(|c| c.1).collect();
            let subj: Vec<f64> = g.iter().map(|c| (c.0 + c.1) / 2.0).collect();
            let diff: Vec<f64> = g.iter().map(|c| c.1 - c.0).collect();
            Group {
                n: g.len() as f64,
                early: mean(&early),
                late: mean(&late),
                subj: mean(&subj),
                diff: mean(&diff),
            }
        })
        .collect();
    let n_total: usize = groups_raw.iter().map(Vec::len).sum();
    let df = (n_total - 2) as u32;
    let (g1, g2) = (&groups[0], &groups[1]);
    let harmonic = 1.0 / g1.n + 1.0 / g2.n;

    let mut ss_subjects = 0.0;
    let mut ss_within = 0.0;
    let mut ss_early = 0.0;
    let mut ss_late = 0.0;
    for (raw, g) in groups_raw.iter().zip(&groups) {
        for &(e, l) in raw {
            let m = (e + l) / 2.0;
            ss_subjects += 2.0 * (m - g.subj).powi(2);
            ss_within += 0.5 * ((l - e) - g.diff).powi(2);
            ss_early += (e - g.early).powi(2);
            ss_late += (l - g.late).powi(2);
        }
    }
    let grand = (g1.n * g1.subj + g2.n * g2.subj) / (g1.n + g2.n);
    let ss_expertise = 2.0 * (g1.n * (g1.subj - grand).powi(2) + g2.n * (g2.subj - grand).powi(2));
    let contrast = (g1.diff + g2.diff) / 2.0;
    let ss_trial = 2.0 * contrast * contrast / harmonic;
    let ss_interaction = (g1.diff - g2.diff).powi(2) / (2.0 * harmonic);

    let expertise = effect(ss_expertise, ss_subjects, df);
    let trial = effect(ss_trial, ss_within, df);
    let interaction = effect(ss_interaction, ss_within, df);

    let effect_sizes = EffectSizes {
        exp_minus_nov: g1.subj - g2.subj,
        late_minus_early: contrast,
        exp_minus_nov_early: g1.early - g2.early,
        exp_minus_nov_late: g1.late - g2.late,
        late_minus_early_exp: g1.diff,
        late_minus_early_nov: g2.diff,
    };

    let ms_within = ss_within / df as f64;
    let se_between = |ss: f64| (ss / df as f64 * harmonic).sqrt();
    let tests = [
        (
            Comparison::ExpNovEarly,
            effect_sizes.exp_minus_nov_early,
            se_between(ss_early),
        ),
        (
            Comparison::ExpNovLate,
            effect_sizes.exp_minus_nov_late,
            se_between(ss_late),
        ),
        (Comparison::LateEarlyExp, g1.diff, (2.0 * ms_within / g1.n).sqrt()),
        (Comparison::LateEarlyNov, g2.diff, (2.0 * ms_within / g2.n).sqrt()),
    ];
    let m = tests.len();
    let post_hoc = tests
        .iter()
        .map(|&(comparison, difference, se)| {
            let t = safe_ratio(difference, se);
            let p = t_two_sided(t, df);
            let b = bonferroni(p, m, alpha);
            PostHoc {
                comparison,
                difference,
                t,
                df,
                p,
                p_adjusted: b.p_adjusted,
                significant: b.significant,
            }
        })
        .collect();

    Ok(AnovaResult {
        n_experienced: groups_raw[0].len(),
        n_novice: groups_raw[1].len(),
        expertise,
        trial,
        interaction,
        effect_sizes,
        post_hoc,
        simple_effects_reported: interaction.p < alpha,
    })
}

// ---------------------------------------------------------------------------
// Bootstrap

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(values: &[f64], level: f64, replicates: usize, seed: u64) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Stats(format!("bootstrap needs at least 2 values, got {n}")));
    }
    if !(level > 0.0 && level < 1.0) || replicates == 0 {
        return Err(Error::Config(format!(
            "bootstrap level {level} or replicate count {replicates} out of range"
        )));
    }
    let pick = Uniform::new(0, n);
    let mut means: Vec<f64> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(seed, i);
            let x0 = values[0];
            x0 + (0..n).map(|_| values[pick.sample(&mut rng)] - x0).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lo_bound = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_bound = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = sorted_quantile(&means, tail).clamp(lo_bound, hi_bound);
    let hi = sorted_quantile(&means, 1.0 - tail).clamp(lo_bound, hi_bound);
    Ok((lo, hi))
}

// ---------------------------------------------------------------------------
// Cohort analysis

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "TT")]
    TaskTime,
    #[serde(rename = "P")]
    PathLength,
    #[serde(rename = "A")]
    NormalizedAngularDisplacement,
    #[serde(rename = "C")]
    OrientationChangeRate,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::TaskTime,
        Metric::PathLength,
        Metric::NormalizedAngularDisplacement,
        Metric::OrientationChangeRate,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            Metric::TaskTime => "TT",
            Metric::PathLength => "P",
            Metric::NormalizedAngularDisplacement => "A",
            Metric::OrientationChangeRate => "C",
        }
    }

    pub fn value(&self, r: &MetricRecord) -> Option<f64> {
        match self {
            Metric::TaskTime => Some(r.tt),
            Metric::PathLength => Some(r.p),
            Metric::NormalizedAngularDisplacement => r.a,
            Metric::OrientationChangeRate => Some(r.c),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}` (expected TT, P, A or C)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub alpha: f64,
    /// Trials per early/late window.
    pub window: u32,
    /// Trials per session; `None` takes the largest trial number in the manifest.
    pub session_length: Option<u32>,
    pub bootstrap_replicates: usize,
    pub bootstrap_level: f64,
    pub lilliefors_replicates: usize,
    /// Analysis-scale transform per metric key (TT, P, A, C).
    pub transforms: BTreeMap<String, Transform>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            alpha: DEFAULT_ALPHA,
            window: DEFAULT_WINDOW,
            session_length: None,
            bootstrap_replicates: DEFAULT_BOOTSTRAP,
            bootstrap_level: 0.95,
            lilliefors_replicates: DEFAULT_LILLIEFORS_REPLICATES,
            transforms: BTreeMap::from([
                ("TT".to_string(), Transform::Log),
                ("P".to_string(), Transform::Log),
                ("A".to_string(), Transform::None),
                ("C".to_string(), Transform::Log),
            ]),
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.window == 0 {
            return Err(Error::Config("early/late window must be at least 1 trial".into()));
        }
        if !(self.bootstrap_level > 0.0 && self.bootstrap_level < 1.0) {
            return Err(Error::Config(format!(
                "bootstrap level {} outside (0, 1)",
                self.bootstrap_level
            )));
        }
        if self.bootstrap_replicates == 0 || self.lilliefors_replicates == 0 {
            return Err(Error::Config("replicate counts must be positive".into()));
        }
        for key in self.transforms.keys() {
            key.parse::<Metric>()?;
        }
        Ok(())
    }

    pub fn transform(&self, metric: Metric) -> Transform {
        self.transforms.get(metric.key()).copied().unwrap_or_default()
    }
}

/// Analysis of one (condition, segment, metric) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAnalysis {
    pub condition: Condition,
    pub segment: Segment,
    pub metric: Metric,
    pub transform: Transform,
    pub advice: Option<TransformAdvice>,
    pub cells: Vec<ParticipantCells>,
    pub anova: Option<AnovaResult>,
    /// Why the ANOVA is missing, when it is.
    pub anova_error: Option<String>,
}

/// A participant left out of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub condition: Condition,
    pub segment: Segment,
    pub metric: Metric,
    pub participant_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub alpha: f64,
    pub window: u32,
    pub session_lengths: BTreeMap<Condition, u32>,
    pub analyses: Vec<MetricAnalysis>,
    pub flags: Vec<Flag>,
}

/// Per-participant series of one metric, on the analysis scale.
/// Outlier-removed segments and undefined values become gaps.
pub fn participant_series(
    records: &[MetricRecord],
    condition: Condition,
    segment: Segment,
    metric: Metric,
    transform: Transform,
) -> Result<Vec<ParticipantSeries>> {
    let mut by_participant: BTreeMap<&str, ParticipantSeries> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.condition == condition && r.segment == segment)
    {
        let value = match metric.value(r) {
            Some(v) if !r.outlier_removed => Some(transform.apply(v)?),
            _ => None,
        };
        by_participant
            .entry(&r.participant_id)
            .or_insert_with(|| ParticipantSeries {
                participant_id: r.participant_id.clone(),
                expertise: r.expertise,
                values: BTreeMap::new(),
            })
            .values
            .insert(r.trial_number, value);
    }
    Ok(by_participant.into_values().collect())
}

/// Runs early/late averaging and the ANOVA for every condition present in
/// `records`, both segments and all four metrics. Conditions are never mixed.
///
/// A condition missing from `session_lengths` uses its largest trial number.
pub fn analyze(
    records: &[MetricRecord],
    config: &StatsConfig,
    session_lengths: &BTreeMap<Condition, u32>,
    seed: u64,
) -> Result<StatsReport> {
    config.validate()?;
    let mut lengths = BTreeMap::new();
    for r in records {
        let l = lengths.entry(r.condition).or_insert(0);
        *l = (*l).max(r.trial_number);
    }
    for (c, l) in lengths.iter_mut() {
        if let Some(&given) = session_lengths.get(c) {
            *l = given;
        }
    }

    let mut analyses = Vec::new();
    let mut flags = Vec::new();
    for (&condition, &session_length) in &lengths {
        for segment in Segment::ALL {
            for metric in Metric::ALL {
                let transform = config.transform(metric);
                let series = match participant_series(records, condition, segment, metric, transform) {
                    Ok(s) => s,
                    Err(e) => {
                        analyses.push(MetricAnalysis {
                            condition,
                            segment,
                            metric,
                            transform,
                            advice: None,
                            cells: Vec::new(),
                            anova: None,
                            anova_error: Some(e.to_string()),
                        });
                        continue;
                    }
                };
                let mut cells = Vec::new();
                for s in &series {
                    match early_late(s, config.window, session_length) {
                        Ok((early, late)) => cells.push(ParticipantCells {
                            participant_id: s.participant_id.clone(),
                            expertise: s.expertise,
                            early,
                            late,
                        }),
                        Err(w) => flags.push(Flag {
                            condition,
                            segment,
                            metric,
                            participant_id: s.participant_id.clone(),
                            reason: format!("empty {} window", if w == Window::Early { "early" } else { "late" }),
                        }),
                    }
                }
                let advice = advisory(records, condition, segment, metric, config, seed);
                let (anova, anova_error) = match mixed_anova_2x2(&cells, config.alpha) {
                    Ok(a) => (Some(a), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                analyses.push(MetricAnalysis {
                    condition,
                    segment,
                    metric,
                    transform,
                    advice,
                    cells,
                    anova,
                    anova_error,
                });
            }
        }
    }
    Ok(StatsReport {
        alpha: config.alpha,
        window: config.window,
        session_lengths: lengths,
        analyses,
        flags,
    })
}

/// Normality advice on raw per-trial values grouped by (participant, window).
fn advisory(
    records: &[MetricRecord],
    condition: Condition,
    segment: Segment,
    metric: Metric,
    config: &StatsConfig,
    seed: u64,
) -> Option<TransformAdvice> {
    let raw = participant_series(records, condition, segment, metric, Transform::None).ok()?;
    let cells: Vec<Vec<f64>> = raw
        .iter()
        .map(|s| s.values.values().flatten().copied().collect())
        .collect();
    select_transform(&cells, config.alpha, config.lilliefors_replicates, seed).ok()
}

// ---------------------------------------------------------------------------
// Learning curves

/// Group mean and bootstrap interval of one metric at one trial number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub trial_number: u32,
    pub group: Expertise,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Per-trial group means with bootstrap intervals. Trial numbers with fewer
/// than two valid values in a group repeat the mean as both bounds.
pub fn learning_curve(
    series: &[ParticipantSeries],
    level: f64,
    replicates: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let mut buckets: BTreeMap<(u32, Expertise), Vec<f64>> = BTreeMap::new();
    for s in series {
        for (&k, v) in &s.values {
            if let Some(v) = v {
                buckets.entry((k, s.expertise)).or_default().push(*v);
            }
        }
    }
    buckets
        .into_iter()
        .map(|((trial_number, group), values)| {
            let m = mean(&values);
            let index = (trial_number as u64) << 1 | (group == Expertise::Novice) as u64;
            let (ci_lo, ci_hi) = if values.len() >= 2 {
                bootstrap_ci(&values, level, replicates, seed.wrapping_add(index))?
            } else {
                (m, m)
            };
            Ok(CurvePoint {
                trial_number,
                group,
                mean: m,
                ci_lo,
                ci_hi,
            })
        })
        .collect()
}
