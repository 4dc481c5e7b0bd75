use std::path::Path;

use anyhow::{Context, Result};
use dentoforge::distill::{DistillConfig, LearningRates};
use dentoforge::gsplat::OrbitSpec;
use dentoforge::layoutdiffusion::{DenoiserConfig, ScheduleKind, TrainConfig};
use serde::{Deserialize, Serialize};

/// Constants published with the method. Kept in one section so any
/// deviation from them is visible at a glance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaperConstants {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_position: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_color: f64,
    pub lr_color_final: f64,
    pub color_decay_epoch: usize,
    pub sh_degree: u32,
    pub dropout: f64,
    pub transformer_blocks: usize,
    pub transformer_heads: usize,
    pub transformer_width: usize,
    /// Layout-model training iterations.
    pub layout_iterations: usize,
    pub guidance_instance: f64,
    pub guidance_scene: f64,
    /// Epochs the stopping rule looks back over.
    pub stop_window: usize,
}

impl Default for PaperConstants {
    fn default() -> Self {
        PaperConstants {
            lambda1: 10.0,
            lambda2: 2.5,
            lr_position: 1.6e-4,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_color: 5e-3,
            lr_color_final: 5e-4,
            color_decay_epoch: 380,
            sh_degree: 0,
            dropout: 0.1,
            transformer_blocks: 5,
            transformer_heads: 8,
            transformer_width: 512,
            layout_iterations: 400,
            guidance_instance: 50.0,
            guidance_scene: 100.0,
            stop_window: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Reduced width for CPU training.
    Toy,
    /// Published transformer shape: 5 blocks, 8 heads, width 512.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSection {
    pub profile: Profile,
    pub toy_blocks: usize,
    pub toy_heads: usize,
    pub toy_width: usize,
    pub ffn_mult: usize,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub sample_steps: usize,
    /// Overrides `paper.layout_iterations` when set.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final_frac: f64,
    pub grad_clip: f64,
    pub min_missing: usize,
    pub max_missing: usize,
}

impl Default for LayoutSection {
    fn default() -> Self {
        LayoutSection {
            profile: Profile::Toy,
            toy_blocks: 3,
            toy_heads: 4,
            toy_width: 64,
            ffn_mult: 2,
            timesteps: 1000,
            schedule: ScheduleKind::Cosine,
            sample_steps: 50,
            epochs: None,
            batch_size: 16,
            lr: 2e-3,
            lr_final_frac: 0.05,
            grad_clip: 1.0,
            min_missing: 1,
            max_missing: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub max_epochs: usize,
    pub stop_rel_tol: f64,
    pub timesteps: usize,
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub collision: bool,
    pub freeze_present: bool,
    pub position_lr_by_extent: bool,
    pub adam_eps: f64,
    pub gaussians_per_tooth: usize,
    /// Training epochs of the learned score when no ground truth is given.
    pub learned_epochs: usize,
    pub learned_channels: usize,
    /// Synthetic jaws rendered to train the learned score.
    pub learned_jaws: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            max_epochs: 400,
            stop_rel_tol: 1e-3,
            timesteps: 1000,
            t_min_frac: 0.02,
            t_max_frac: 0.98,
            collision: true,
            freeze_present: false,
            position_lr_by_extent: true,
            adam_eps: 1e-15,
            gaussians_per_tooth: 200,
            learned_epochs: 6,
            learned_channels: 16,
            learned_jaws: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    /// Orbit around the whole jaw.
    pub scene: OrbitSpec,
    /// Orbit around each generated tooth.
    pub instance: OrbitSpec,
}

impl Default for CameraSection {
    fn default() -> Self {
        CameraSection {
            scene: OrbitSpec {
                image_size: 64,
                ..OrbitSpec::default()
            },
            instance: OrbitSpec {
                azimuths: 8,
                image_size: 48,
                ..OrbitSpec::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Ground-truth points (and truth Gaussians) per tooth.
    pub points_per_tooth: usize,
    /// Seed of the truth point and Gaussian samples of every jaw.
    pub truth_seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            points_per_tooth: 200,
            truth_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// F-score distance threshold, mm.
    pub tau_mm: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { tau_mm: 0.3 }
    }
}

/// Every tunable of the pipeline. Values missing from a config file keep
/// their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paper: PaperConstants,
    pub layout: LayoutSection,
    pub distill: DistillSection,
    pub cameras: CameraSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.distill_config().validate()?;
        let l = &self.layout;
        anyhow::ensure!(l.timesteps > 0 && l.sample_steps > 0, "layout timesteps and sample_steps must be positive");
        anyhow::ensure!(self.distill.timesteps > 0, "distill timesteps must be positive");
        anyhow::ensure!(self.eval.tau_mm > 0.0, "eval.tau_mm must be positive");
        anyhow::ensure!(self.paper.sh_degree == 0, "only SH degree 0 is supported");
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let p = &self.paper;
        match self.layout.profile {
            Profile::Paper => DenoiserConfig {
                blocks: p.transformer_blocks,
                heads: p.transformer_heads,
                width: p.transformer_width,
                ffn_mult: 4,
                dropout: p.dropout,
            },
            Profile::Toy => DenoiserConfig {
                blocks: self.layout.toy_blocks,
                heads: self.layout.toy_heads,
                width: self.layout.toy_width,
                ffn_mult: self.layout.ffn_mult,
                dropout: p.dropout,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let l = &self.layout;
        TrainConfig {
            epochs: l.epochs.unwrap_or(self.paper.layout_iterations),
            batch_size: l.batch_size,
            lr: l.lr,
            seed: self.seed,
            min_missing: l.min_missing,
            max_missing: l.max_missing,
            grad_clip: l.grad_clip,
            lr_final_frac: l.lr_final_frac,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let (p, d) = (&self.paper, &self.distill);
        DistillConfig {
            lambda1: p.lambda1,
            lambda2: p.lambda2,
            lr: LearningRates {
                position: p.lr_position,
                opacity: p.lr_opacity,
                scale: p.lr_scale,
                rotation: p.lr_rotation,
                color: p.lr_color,
                color_final: p.lr_color_final,
                color_decay_epoch: p.color_decay_epoch,
            },
            position_lr_by_extent: d.position_lr_by_extent,
            max_epochs: d.max_epochs,
            stop_window: p.stop_window,
            stop_rel_tol: d.stop_rel_tol,
            guidance_instance: p.guidance_instance,
            guidance_scene: p.guidance_scene,
            t_min_frac: d.t_min_frac,
            t_max_frac: d.t_max_frac,
            collision: d.collision,
            freeze_present: d.freeze_present,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: d.adam_eps,
        }
    }
}
