//! Quantizing the denoiser while keeping its timestep-only features
//! accurate.
//!
//! The time branch (time embedding plus each block's embedding layer) is
//! grouped into one unit. It is either reconstructed and calibrated per
//! timestep, replaced by a cache of quantized features, or the two are mixed
//! per timestep and block.

pub mod assemble;
pub mod cache;
pub mod calib;
pub mod fsc;
pub mod hooks;
pub mod pipeline;
pub mod reconstruct;
pub mod select;
pub mod tib;

pub use assemble::{assemble_quantized_model, QuantizedDenoiser};
pub use cache::{cache_maintain, CacheEntry, TemporalFeatureCache};
pub use calib::{generate_calibration, init_activations, init_weights, CalibSet, InitConfig};
pub use fsc::{fsc_calibrate, quantized_features, shared_calibrate};
pub use hooks::{QuantHooks, QuantState, StoredFeatures};
pub use pipeline::{quantize_model, QuantBundle, QuantizeConfig, Strategy, StrategyReport};
pub use reconstruct::{block_reconstruct, tiar_objective, tiar_reconstruct, ReconConfig, ReconReport};
pub use select::{feature_loss, loss_table, select_maintenance, Choice, LossKind, MaskCell, SelectionMask};
pub use tib::{build_tib, non_tib_activation_sites, non_tib_layers, TemporalInformationBlock};
