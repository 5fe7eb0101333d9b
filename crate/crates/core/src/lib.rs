//! Post-training quantization laboratory for small diffusion denoisers.
//!
//! The crate trains a tiny noise-prediction network on 2-D point clouds,
//! quantizes it, and maintains the timestep-only features (`g_i(h(t))`) that
//! the network injects into each residual block, either by reconstructing and
//! calibrating the time-embedding layers as one unit or by caching quantized
//! copies of the features, choosing per timestep and block whichever is more
//! accurate.

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod maintenance;
pub mod optim;
pub mod quant;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
