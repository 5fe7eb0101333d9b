//! Diagnostics: temporal feature error, mismatch, noise sensitivity and
//! sample-quality metrics.

pub mod metrics;
pub mod sensitivity;
pub mod temporal;
pub mod trajectory;

pub use metrics::{mmd2, spearman, sqnr};
pub use sensitivity::{inject_noise, sensitivity_sweep, InjectionTarget, SweepConfig, SweepRow, SweepTable};
pub use temporal::{mean_abs_delta, mismatch_index, temporal_error, TemporalError};
pub use trajectory::{trajectory_report, TrajectoryReport};
