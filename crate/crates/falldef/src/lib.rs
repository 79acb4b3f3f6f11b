//! Fall detection from tri-axial wrist accelerometer data.
//!
//! The pipeline goes: raw CSV recordings -> fixed-length windows with
//! majority-vote labels -> class-balanced, stratified train/val/test splits ->
//! a stacked-GRU classifier trained with Adam and early stopping -> evaluation
//! reports -> a line-delimited TCP service that classifies live streams and
//! raises fall alerts.
//!
//! Everything downstream of a seed is deterministic: same inputs and seeds
//! produce byte-identical artifacts (datasets, models, logs, reports).

pub mod cli;
pub mod dataset;
pub mod dgru;
pub mod edge;
pub mod metrics;
pub mod numerics;
pub mod training;
