//! Toy diffusion: noise schedule, 2-D datasets, the denoiser, training,
//! sampling and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod features;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{DatasetName, ToyDataset};
pub use features::{capture_temporal_features, capture_with, FeatureTable};
pub use model::{DenoiserGraph, ForwardHooks, FullPrecision, ModelConfig, TrainableParams};
pub use sampler::{ddim_step, denoise_step, sample, sample_with, Sampler, SAMPLE_CHUNK};
pub use schedule::NoiseSchedule;
pub use train::{draw_batch, noise_mse, train, NoisedBatch, TrainConfig, TrainReport};
