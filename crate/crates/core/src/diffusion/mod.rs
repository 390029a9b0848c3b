//! Pixel-space class-conditional denoising diffusion over tri-channel images.
//!
//! [`unet::Denoiser`] predicts the noise added by [`schedule::forward_diffuse`];
//! [`train`] fits it (fully, or adapters only) and [`sample`] runs the strided
//! ancestral reverse process. Trimester conditioning is a learned class
//! embedding, one class per prompt string.

pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

pub use sample::{sample, sample_batch, AdapterRouter, SamplerConfig};
pub use schedule::{forward_diffuse, NoiseSchedule};
pub use train::{train_denoiser, train_per_trimester, DiffusionTrainConfig, TrainLog, TrainMode, TrimesterAdapters};
pub use unet::{Denoiser, DenoiserConfig};

use crate::image::{ImageError, TrimesterLabel};
use crate::lora::LoraError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffusionError {
    #[error("timestep {t} outside 1..={max}")]
    BadTimestep { t: usize, max: usize },
    #[error("bad noise schedule: {0}")]
    BadSchedule(&'static str),
    #[error("bad sampler configuration: {0}")]
    BadSampler(&'static str),
    #[error("bad model configuration: {0}")]
    BadConfig(&'static str),
    #[error("input shapes do not match")]
    ShapeMismatch,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("no training images for the {0} trimester")]
    EmptyTrimester(TrimesterLabel),
    #[error("loss became non-finite at step {step} (last finite loss {last})")]
    NonFiniteLoss { step: usize, last: f64 },
    #[error("model has not been trained")]
    UntrainedModel,
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Image(#[from] ImageError),
}
