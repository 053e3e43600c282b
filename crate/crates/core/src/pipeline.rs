//! File-based pipeline stages: ingest → segment → metrics → stats → report.
//!
//! Every stage reads the previous stage's artifacts under the output
//! directory and fails with [`Error::MissingArtifact`] when they are absent.
//! Per-trial soft failures go to `diagnostics.csv`; each stage replaces its
//! own rows there, so re-running a stage rewrites identical files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{self, CalibrationModel, Condition, Expertise, ManifestEntry, Trial, TrialMeta};
use crate::metrics::{self, MetricRecord, Segment};
use crate::segmentation::{self, BoundarySource, Outcome, SegmentBoundaries};
use crate::stats::{self, Metric, StatsReport, Window};
use crate::synth::stream_id;

pub const INGEST_INDEX: &str = "ingest/index.json";
pub const CALIBRATION_MODEL: &str = "calibration.json";
pub const SEGMENTATION_REPORT: &str = "segmentation.csv";
pub const METRICS_TABLE: &str = "metrics.csv";
pub const STATS_REPORT: &str = "stats.json";
pub const REPORT_DIR: &str = "report";
pub const DIAGNOSTICS: &str = "diagnostics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Calibrate,
    Ingest,
    Segment,
    Metrics,
    Stats,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Calibrate => "calibrate",
            Stage::Ingest => "ingest",
            Stage::Segment => "segment",
            Stage::Metrics => "metrics",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }
}

/// A soft, per-trial or per-participant problem.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnostic {
    pub stage: Stage,
    pub id: String,
    pub kind: String,
    pub detail: String,
}

impl Diagnostic {
    fn new(stage: Stage, id: &str, kind: &str, detail: impl Into<String>) -> Self {
        Diagnostic {
            stage,
            id: id.to_string(),
            kind: kind.to_string(),
            detail: detail.into(),
        }
    }
}

/// Replaces `stage`'s rows in the diagnostics file.
fn record_diagnostics(out: &Path, stage: Stage, mut rows: Vec<Diagnostic>) -> Result<()> {
    let path = out.join(DIAGNOSTICS);
    let mut all: Vec<Diagnostic> = if path.exists() {
        read_csv(&path)?
            .into_iter()
            .filter(|d: &Diagnostic| d.stage != stage)
            .collect()
    } else {
        Vec::new()
    };
    all.append(&mut rows);
    all.sort();
    write_csv(&path, &all)
}

pub fn read_diagnostics(out: &Path) -> Result<Vec<Diagnostic>> {
    read_csv(&out.join(DIAGNOSTICS))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(file).deserialize() {
        out.push(row?);
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(out: &Path, artifact: &str, stage: Stage) -> Result<PathBuf> {
    let path = out.join(artifact);
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            stage: stage.name(),
        })
    }
}

/// Runs `f` on a pool of `jobs` threads (all cores when 0).
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

// ---------------------------------------------------------------------------
// calibrate / ingest

/// Fits lever arms from a calibration recording and stores the model.
pub fn calibrate(config: &RunConfig, recording: &Path) -> Result<CalibrationModel> {
    let model = ingest::calibrate_endpoint(&ingest::load_calibration(recording)?)?;
    write_json(&config.out_dir().join(CALIBRATION_MODEL), &model)?;
    Ok(model)
}

/// One manifest trial as seen by later stages; `cache` is absent for
/// excluded trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    #[serde(flatten)]
    pub meta: TrialMeta,
    pub cache: Option<PathBuf>,
}

fn cache_name(trial_id: &str) -> PathBuf {
    PathBuf::from("ingest").join(format!("{trial_id}.json"))
}

fn calibration_for(config: &RunConfig, entries: &[&ManifestEntry]) -> Result<Option<CalibrationModel>> {
    if !entries.iter().any(|e| e.meta.condition == Condition::Open) {
        return Ok(None);
    }
    if let Some(rec) = &config.paths.calibration {
        return calibrate(config, rec).map(Some);
    }
    let stored = require(config.out_dir(), CALIBRATION_MODEL, Stage::Calibrate)?;
    read_json(&stored).map(Some)
}

pub fn ingest(config: &RunConfig) -> Result<Vec<IndexEntry>> {
    let manifest = config
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no manifest given (paths.manifest)".into()))?;
    let entries: Vec<ManifestEntry> = ingest::load_manifest(manifest)?
        .into_iter()
        .filter(|e| config.condition.is_none_or(|c| e.meta.condition == c))
        .collect();
    let included: Vec<&ManifestEntry> = entries.iter().filter(|e| !e.meta.excluded).collect();
    let calib = calibration_for(config, &included)?;
    let out = config.out_dir();
    with_pool(config.jobs, || {
        included.par_iter().try_for_each(|e| {
            let trial = ingest::ingest_trial(e, &config.preprocess, calib.as_ref())?;
            write_json(&out.join(cache_name(&e.meta.trial_id)), &trial)
        })
    })?;

    let mut index: Vec<IndexEntry> = entries
        .iter()
        .map(|e| IndexEntry {
            meta: e.meta.clone(),
            cache: (!e.meta.excluded).then(|| cache_name(&e.meta.trial_id)),
        })
        .collect();
    index.sort_by(|a, b| a.meta.trial_id.cmp(&b.meta.trial_id));
    write_json(&out.join(INGEST_INDEX), &index)?;
    let diags = index
        .iter()
        .filter(|e| e.meta.excluded)
        .map(|e| {
            let reason = e.meta.exclusion_reason.as_deref().unwrap_or("excluded in manifest");
            Diagnostic::new(Stage::Ingest, &e.meta.trial_id, "excluded", reason)
        })
        .collect();
    record_diagnostics(out, Stage::Ingest, diags)?;
    Ok(index)
}

fn load_index(out: &Path) -> Result<Vec<IndexEntry>> {
    read_json(&require(out, INGEST_INDEX, Stage::Ingest)?)
}

fn load_cached(out: &Path, entry: &IndexEntry) -> Result<Option<Trial>> {
    match &entry.cache {
        None => Ok(None),
        Some(rel) => {
            let path = out.join(rel);
            if !path.exists() {
                return Err(Error::MissingArtifact {
                    path,
                    stage: Stage::Ingest.name(),
                });
            }
            read_json(&path).map(Some)
        }
    }
}

// ---------------------------------------------------------------------------
// segment

/// One row of the segmentation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub trial_id: String,
    pub j1_time_s: Option<f64>,
    pub j2_time_s: Option<f64>,
    pub source: BoundarySource,
    pub failure_reason: Option<String>,
}

pub fn segment(config: &RunConfig) -> Result<Vec<SegmentationRow>> {
    let out = config.out_dir();
    let index = load_index(out)?;
    let overrides = match &config.paths.overrides {
        Some(p) => segmentation::load_overrides(p)?,
        None => Vec::new(),
    };
    let rate = config.preprocess.rate;
    let results: Vec<(String, Vec<f64>, Outcome)> = with_pool(config.jobs, || {
        index
            .par_iter()
            .filter(|e| e.cache.is_some())
            .map(|e| {
                let trial = load_cached(out, e)?.expect("cached trial");
                let outcome = segmentation::segment_trial(&trial, &config.segmentation, rate);
                Ok((e.meta.trial_id.clone(), trial.times(), outcome))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut outcomes: BTreeMap<String, Outcome> = BTreeMap::new();
    let mut grids: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (id, times, outcome) in results {
        outcomes.insert(id.clone(), outcome);
        grids.insert(id, times);
    }
    segmentation::apply_overrides(&mut outcomes, &grids, &overrides)?;

    let mut rows = Vec::new();
    let mut diags = Vec::new();
    for (id, outcome) in &outcomes {
        let times = &grids[id];
        rows.push(match outcome {
            Ok(b) => SegmentationRow {
                trial_id: id.clone(),
                j1_time_s: Some(times[b.j1]),
                j2_time_s: Some(times[b.j2]),
                source: b.source,
                failure_reason: None,
            },
            Err(f) => {
                diags.push(Diagnostic::new(
                    Stage::Segment,
                    id,
                    "segmentation_failure",
                    f.to_string(),
                ));
                SegmentationRow {
                    trial_id: id.clone(),
                    j1_time_s: None,
                    j2_time_s: None,
                    source: BoundarySource::Auto,
                    failure_reason: Some(f.to_string()),
                }
            }
        });
    }
    write_csv(&out.join(SEGMENTATION_REPORT), &rows)?;
    record_diagnostics(out, Stage::Segment, diags)?;
    Ok(rows)
}

fn nearest(times: &[f64], t: f64) -> usize {
    let k = times.partition_point(|&x| x < t);
    if k == 0 {
        0
    } else if k == times.len() || t - times[k - 1] <= times[k] - t {
        k - 1
    } else {
        k
    }
}

// ---------------------------------------------------------------------------
// metrics

pub fn compute_metrics(config: &RunConfig) -> Result<Vec<MetricRecord>> {
    let out = config.out_dir();
    let index = load_index(out)?;
    let report: Vec<SegmentationRow> = read_csv(&require(out, SEGMENTATION_REPORT, Stage::Segment)?)?;
    let by_id: BTreeMap<&str, &IndexEntry> = index.iter().map(|e| (e.meta.trial_id.as_str(), e)).collect();
    let mut diags = Vec::new();
    let mut todo = Vec::new();
    for row in &report {
        let entry = by_id
            .get(row.trial_id.as_str())
            .ok_or_else(|| Error::Data(format!("segmentation report names unknown trial `{}`", row.trial_id)))?;
        match (row.j1_time_s, row.j2_time_s) {
            (Some(t1), Some(t2)) => todo.push((*entry, t1, t2, row.source)),
            _ => diags.push(Diagnostic::new(
                Stage::Metrics,
                &row.trial_id,
                "unsegmented",
                "no boundaries; add a manual override",
            )),
        }
    }
    let mut observations: Vec<metrics::SegmentObservation> = with_pool(config.jobs, || {
        todo.par_iter()
            .map(|&(entry, t1, t2, source)| {
                let trial = load_cached(out, entry)?.expect("segmented trials are cached");
                let times = trial.times();
                let b = SegmentBoundaries {
                    j1: nearest(&times, t1),
                    j2: nearest(&times, t2),
                    source,
                };
                metrics::compute_trial(&trial, &b)
            })
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();

    for r in metrics::remove_outlier_segments(&mut observations, config.metrics.outlier_multiplier) {
        diags.push(Diagnostic::new(
            Stage::Metrics,
            &r.trial_id,
            "outlier_removed",
            format!(
                "segment {}: step angle {:.6} rad exceeds {} x group mean {:.6} rad",
                r.segment, r.max_dtheta, config.metrics.outlier_multiplier, r.group_mean
            ),
        ));
    }
    let mut records: Vec<MetricRecord> = observations.into_iter().map(|o| o.record).collect();
    records.sort_by(|a, b| (&a.trial_id, a.segment).cmp(&(&b.trial_id, b.segment)));
    for r in records.iter().filter(|r| r.a.is_none()) {
        diags.push(Diagnostic::new(
            Stage::Metrics,
            &r.trial_id,
            "undefined_metric",
            format!("segment {}: zero path length, A omitted", r.segment),
        ));
    }
    metrics::write_metrics(&out.join(METRICS_TABLE), &records)?;
    record_diagnostics(out, Stage::Metrics, diags)?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// stats / report

fn session_lengths(config: &RunConfig, index: &[IndexEntry]) -> BTreeMap<Condition, u32> {
    let mut lengths = BTreeMap::new();
    for e in index {
        let l = lengths.entry(e.meta.condition).or_insert(0);
        *l = (*l).max(e.meta.trial_number);
    }
    if let Some(n) = config.stats.session_length {
        lengths.values_mut().for_each(|l| *l = n);
    }
    lengths
}

pub fn compute_stats(config: &RunConfig) -> Result<StatsReport> {
    let out = config.out_dir();
    let index = load_index(out)?;
    let records = metrics::read_metrics(&require(out, METRICS_TABLE, Stage::Metrics)?)?;
    let report = with_pool(config.jobs, || {
        stats::analyze(&records, &config.stats, &session_lengths(config, &index), config.seed)
    })?;
    write_json(&out.join(STATS_REPORT), &report)?;
    let mut diags: Vec<Diagnostic> = report
        .flags
        .iter()
        .map(|f| {
            Diagnostic::new(
                Stage::Stats,
                &f.participant_id,
                "excluded_from_anova",
                format!("{} segment {} {}: {}", f.condition, f.segment, f.metric, f.reason),
            )
        })
        .collect();
    for a in report.analyses.iter().filter(|a| a.anova.is_none()) {
        diags.push(Diagnostic::new(
            Stage::Stats,
            &format!("{}/{}/{}", a.condition, a.segment, a.metric),
            "no_anova",
            a.anova_error.clone().unwrap_or_default(),
        ));
    }
    record_diagnostics(out, Stage::Stats, diags)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyLateRow {
    pub group: Expertise,
    pub window: Window,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub condition: Condition,
    pub segment: Segment,
    pub metric: Metric,
    pub transform: stats::Transform,
    pub effect: String,
    #[serde(rename = "F")]
    pub f: f64,
    pub p: f64,
    pub df_num: u32,
    pub df_den: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceRow {
    pub condition: Condition,
    pub segment: Segment,
    pub metric: Metric,
    pub comparison: String,
    pub difference: f64,
    /// Bonferroni-adjusted for the four simple-effect rows.
    pub p: Option<f64>,
    pub significant: Option<bool>,
}

fn file_stem(condition: Condition, segment: Segment, metric: Metric) -> String {
    format!("{}_{}_{}", condition.as_str(), segment.as_str(), metric.key())
}

/// Writes plot-ready tables under `report/`: per-trial learning curves,
/// early/late summaries, the effect table and the mean-difference table.
pub fn report(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = config.out_dir();
    let stats_report: StatsReport = read_json(&require(out, STATS_REPORT, Stage::Stats)?)?;
    let records = metrics::read_metrics(&require(out, METRICS_TABLE, Stage::Metrics)?)?;
    let dir = out.join(REPORT_DIR);
    let level = config.stats.bootstrap_level;
    let b = config.stats.bootstrap_replicates;
    let mut written = Vec::new();
    let mut effects = Vec::new();
    let mut differences = Vec::new();

    for a in &stats_report.analyses {
        let stem = file_stem(a.condition, a.segment, a.metric);
        let seed = config.seed ^ stream_id(&stem);
        let series =
            stats::participant_series(&records, a.condition, a.segment, a.metric, a.transform).unwrap_or_default();
        let curve = with_pool(config.jobs, || stats::learning_curve(&series, level, b, seed))?;
        let path = dir.join(format!("learning_curve_{stem}.csv"));
        write_csv(&path, &curve)?;
        written.push(path);

        let mut rows = Vec::new();
        for (k, group) in [Expertise::Experienced, Expertise::Novice].into_iter().enumerate() {
            for (w, window) in [Window::Early, Window::Late].into_iter().enumerate() {
                let values: Vec<f64> = a
                    .cells
                    .iter()
                    .filter(|c| c.expertise == group)
                    .map(|c| if window == Window::Early { c.early } else { c.late })
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let (ci_lo, ci_hi) = if values.len() >= 2 {
                    let s = seed.wrapping_add(1 + 2 * k as u64 + w as u64);
                    with_pool(config.jobs, || stats::bootstrap_ci(&values, level, b, s))?
                } else {
                    (mean, mean)
                };
                rows.push(EarlyLateRow {
                    group,
                    window,
                    mean,
                    ci_lo,
                    ci_hi,
                    n: values.len(),
                });
            }
        }
        let path = dir.join(format!("early_late_{stem}.csv"));
        write_csv(&path, &rows)?;
        written.push(path);

        if let Some(r) = &a.anova {
            for (name, e) in [
                ("expertise", r.expertise),
                ("trial", r.trial),
                ("expertise*trial", r.interaction),
            ] {
                effects.push(EffectRow {
                    condition: a.condition,
                    segment: a.segment,
                    metric: a.metric,
                    transform: a.transform,
                    effect: name.into(),
                    f: e.f,
                    p: e.p,
                    df_num: e.df_num,
                    df_den: e.df_den,
                });
            }
            let row = |comparison: &str, difference: f64, p: Option<(f64, bool)>| DifferenceRow {
                condition: a.condition,
                segment: a.segment,
                metric: a.metric,
                comparison: comparison.into(),
                difference,
                p: p.map(|x| x.0),
                significant: p.map(|x| x.1),
            };
            differences.push(row(
                "Exp-Nov",
                r.effect_sizes.exp_minus_nov,
                Some((r.expertise.p, r.expertise.p < stats_report.alpha)),
            ));
            differences.push(row(
                "Late-Early",
                r.effect_sizes.late_minus_early,
                Some((r.trial.p, r.trial.p < stats_report.alpha)),
            ));
            if r.simple_effects_reported {
                for ph in &r.post_hoc {
                    let name = serde_json::to_value(ph.comparison)?
                        .as_str()
                        .unwrap_or_default()
                        .to_string();
                    differences.push(row(&name, ph.difference, Some((ph.p_adjusted, ph.significant))));
                }
            }
        }
    }
    let path = dir.join("effects.csv");
    write_csv(&path, &effects)?;
    written.push(path);
    let path = dir.join("differences.csv");
    write_csv(&path, &differences)?;
    written.push(path);
    Ok(written)
}

/// Every stage in order.
pub fn run(config: &RunConfig) -> Result<()> {
    ingest(config)?;
    segment(config)?;
    compute_metrics(config)?;
    compute_stats(config)?;
    report(config)?;
    Ok(())
}

/// Output files of a completed run, relative to the output directory, sorted.
pub fn artifacts(out: &Path) -> Result<BTreeSet<PathBuf>> {
    fn walk(base: &Path, dir: &Path, acc: &mut BTreeSet<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(base, &path, acc)?;
            } else {
                acc.insert(path.strip_prefix(base).unwrap_or(&path).to_path_buf());
            }
        }
        Ok(())
    }
    let mut acc = BTreeSet::new();
    walk(out, out, &mut acc)?;
    Ok(acc)
}
