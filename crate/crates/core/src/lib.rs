//! Kinematic analysis of needle-driving trials.
//!
//! The pipeline turns raw instrument pose recordings into per-segment skill
//! metrics and cohort statistics:
//!
//! * [`ingest`] loads teleoperated and open-condition recordings, derives the
//!   driver endpoint and opening angle from the two open-condition trackers,
//!   and resamples/filters everything onto a uniform 100 Hz grid;
//! * [`segmentation`] finds the ends of the transport and insertion phases;
//! * [`metrics`] computes task time, path length, normalized angular
//!   displacement and rate of orientation change;
//! * [`stats`] runs the early/late mixed-design ANOVA, post-hoc comparisons and
//!   bootstrap intervals;
//! * [`synth`] generates trials with known ground truth;
//! * [`pipeline`] chains the stages over files, configured by [`config`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dsp;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod rotations;
pub mod segmentation;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
