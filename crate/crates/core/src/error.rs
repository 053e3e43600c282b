use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation frame{}: smallest singular value {sigma_min:e}", fmt_sample(*.sample))]
    DegenerateFrame { sample: Option<usize>, sigma_min: f64 },

    #[error("query time {time} s outside recorded span [{start}, {end}] s")]
    OutOfRange { time: f64, start: f64, end: f64 },

    #[error("signal too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: schema mismatch: {detail}")]
    Schema { path: PathBuf, detail: String },

    #[error("{path}: row {row}: {detail}")]
    Row { path: PathBuf, row: usize, detail: String },

    #[error("{path}: file contains no samples")]
    Empty { path: PathBuf },

    #[error("ill-conditioned calibration: {0}")]
    IllConditioned(String),

    #[error("segmentation failed: {0}")]
    Segmentation(#[from] crate::segmentation::SegmentationFailure),

    #[error("override error: {0}")]
    Override(String),

    #[error("degenerate segment: {0}")]
    DegenerateSegment(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("log transform infeasible: value {0} is not positive")]
    TransformInfeasible(f64),

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_sample(sample: Option<usize>) -> String {
    match sample {
        Some(i) => format!(" at sample {i}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
