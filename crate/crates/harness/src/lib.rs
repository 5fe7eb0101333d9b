//! Runnable experiments on top of `timeq-core`: configuration, the
//! train/quantize/eval pipeline, analyses and reports.

pub mod config;
pub mod error;
pub mod manifest;
pub mod output;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{EvalRow, Experiment, Target};
