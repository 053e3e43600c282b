//! Run configuration: a TOML file, `NEEDLEMETRICS_*` environment overrides
//! and command-line flags, applied in that order.
//!
//! ```toml
//! seed = 7
//! [paths]
//! manifest = "cohort/manifest.json"
//! calibration = "cohort/calibration.csv"
//! out = "out"
//! [segmentation]
//! x_threshold = -135.0
//! [stats.transforms]
//! A = "log"
//! ```
//!
//! An environment variable `NEEDLEMETRICS_SECTION__KEY=value` sets
//! `section.key`; the value is read as a TOML literal and falls back to a
//! plain string. `NEEDLEMETRICS_CONFIG` names the file itself and is skipped.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Condition, PreprocessConfig};
use crate::metrics::OUTLIER_MULTIPLIER;
use crate::segmentation::SegmentationParams;
use crate::stats::StatsConfig;

pub const ENV_PREFIX: &str = "NEEDLEMETRICS_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub overrides: Option<PathBuf>,
    /// Open-condition calibration recording.
    pub calibration: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            manifest: None,
            overrides: None,
            calibration: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub outlier_multiplier: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            outlier_multiplier: OUTLIER_MULTIPLIER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Restrict the run to one condition; both are analyzed (separately) otherwise.
    pub condition: Option<Condition>,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub paths: Paths,
    pub preprocess: PreprocessConfig,
    pub segmentation: SegmentationParams,
    pub metrics: MetricOptions,
    pub stats: StatsConfig,
}

impl RunConfig {
    /// Reads `path` (if any), then applies overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in env {
            if let Some(rest) = key.strip_prefix(ENV_PREFIX).filter(|r| *r != "CONFIG") {
                let path: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
                set_path(&mut table, &path, parse_literal(&value))?;
            }
        }
        RunConfig::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<RunConfig> {
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        if !(p.rate > 0.0) {
            return Err(Error::Config(format!("resample rate {} must be positive", p.rate)));
        }
        if !(p.position_cutoff > 0.0 && p.position_cutoff < p.rate / 2.0) {
            return Err(Error::Config(format!(
                "position cutoff {} Hz outside (0, {}) Hz",
                p.position_cutoff,
                p.rate / 2.0
            )));
        }
        self.segmentation.validate(p.rate)?;
        if !(self.metrics.outlier_multiplier > 0.0) {
            return Err(Error::Config("outlier multiplier must be positive".into()));
        }
        self.stats.validate()
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out
    }
}

fn parse_literal(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Sets `table[path[0]][path[1]]...` to `value`, creating tables on the way.
pub fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for key in parents {
        cur = cur
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{}` crosses a non-table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}
