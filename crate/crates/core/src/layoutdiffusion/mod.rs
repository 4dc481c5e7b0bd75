//! Conditional Gaussian diffusion over the layouts of missing teeth, with a
//! graph-transformer denoiser conditioned on the observed teeth and a prompt.

mod checkpoint;
mod model;
pub mod nn;
mod sample;
mod schedule;
mod text;
mod train;

use thiserror::Error;

use crate::jawgraph::JawGraphError;
use crate::synthjaw::SynthError;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use model::{
    missing_prompt, timestep_embedding, Denoiser, DenoiserConfig, GraphInput, Normalizer, TEXT_TOKENS,
};
pub use sample::{sample_layout, sample_layout_with, NoisePredictor, X0_CLIP};
pub use schedule::{forward_noise, kl_term, make_schedule, NoiseSchedule, ScheduleKind};
pub use text::{embed_text, TextEmbedding, TEXT_DIM};
pub use train::{
    make_examples, noise_example, noise_mse, train_step, vlb_estimate, LayoutModel, NoisedExample, TrainConfig,
    TrainExample, Trainer,
};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("prompt is empty or has no tokens")]
    EmptyPrompt,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model was trained with T = {model}, schedule has T = {schedule}")]
    ScheduleMismatch { model: usize, schedule: usize },
    #[error("non-finite loss for training sample {sample} in epoch {epoch}")]
    NonFiniteLoss { sample: usize, epoch: usize },
    #[error("invalid source graph: {0}")]
    InvalidSource(String),
    #[error(transparent)]
    Graph(#[from] JawGraphError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
