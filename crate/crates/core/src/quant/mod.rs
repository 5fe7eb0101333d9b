//! Uniform affine fake quantization.
//!
//! Codes follow `Φ(⌊x/s⌉ + z, 0, 2^b − 1)` with ties rounded to even and are
//! mapped back with `s · (code − z)`. Parameters come from one of the range
//! estimators and may be refined with [`lsq_optimize`].

mod estimate;
mod lsq;
mod params;
mod set;

pub use estimate::{estimate_range, RangeMethod, KL_BINS, MSE_GRID, PERCENTILE};
pub use lsq::{lsq_optimize, LsqConfig, LsqOutcome};
pub use params::{
    affine_from_range, dequantize, fake_quant, levels, quant_error, quantize, symmetric_from_range,
    Granularity, IntCodes, QuantParams, MIN_SCALE,
};
pub use set::{ActParams, QuantParamSet};
