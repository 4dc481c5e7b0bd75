//! Score distillation of per-tooth Gaussians against a noise-predicting
//! prior, with collision regularization and an alternating scene/instance
//! optimizer.

mod learned;
mod optimize;
mod provider;
mod sds;

use thiserror::Error;

use crate::gsplat::RenderError;
use crate::jawgraph::ToothId;

pub use learned::{LearnedConfig, LearnedScore, ScoreSample};
pub use optimize::{
    instance_cameras, instance_gradient, neighbor_collision_grad, optimize, tooth_prompt, total_loss, DistillConfig, LearningRates, OptimState,
    OptimizeInputs, OptimizeResult, TraceRecord,
};
pub use provider::{PerfectScore, ReferenceScore, ScoreProvider, ScoreQuery, ViewKey};
pub use sds::{draw_noise, sds_grad_instance, sds_grad_scene, SdsOutput, SdsStep};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("provider returned a {got_w}x{got_h} prediction for a {want_w}x{want_h} latent")]
    ProviderShape {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("reference provider has no target for {0}")]
    MissingTarget(ViewKey),
    #[error("non-finite {term} in epoch {epoch}")]
    NonFinite { epoch: usize, term: String },
    #[error("no cameras given for {0}")]
    NoCameras(String),
    #[error("tooth {0} is not in the scene")]
    UnknownTooth(ToothId),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
}
