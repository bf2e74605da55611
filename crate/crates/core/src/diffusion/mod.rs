//! Conditional denoising diffusion over action windows.

mod checkpoint;
mod net;
mod sampler;
mod schedule;
mod train;

use thiserror::Error;

pub use checkpoint::{Horizons, PolicyCheckpoint, CHECKPOINT_SCHEMA};
pub use net::{
    time_embedding, DenoiserNet, Layer, LayerKind, NetShape, DEFAULT_HIDDEN, DEFAULT_TIME_EMBEDDING,
};
pub use sampler::{
    accelerated_steps, guidance_gradient, sample_window, window_cost, Guidance, GuidanceConfig,
    NetPredictor, NoisePredictor, SampleOptions, SamplerKind, WindowCost,
};
pub use schedule::{
    forward_diffuse, squared_cosine_schedule, NoiseSchedule, COSINE_OFFSET, MAX_BETA,
};
pub use train::{
    ema_update, log_csv, train, Adam, Dataset, LogRow, LrDecay, Normalizer, TrainConfig,
    TrainOutcome, Window,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {step} outside 0..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("shape mismatch: expected length {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("sampler produced a non-finite action")]
    NonFiniteSample,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint schema {found} is not supported (expected {expected}); retrain or convert the file")]
    SchemaVersion { found: String, expected: u32 },
    #[error("guidance cost failed: {0}")]
    Cost(String),
}
