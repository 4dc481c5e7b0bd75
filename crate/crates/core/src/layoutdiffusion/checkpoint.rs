use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{Denoiser, DenoiserConfig, Normalizer};
use super::nn::{Adam, Mat};
use super::schedule::{make_schedule, ScheduleKind};
use super::train::{LayoutModel, TrainConfig, Trainer};
use crate::jawgraph::{FEATURE_DIM, LAYOUT_DIM};

const MAGIC: &[u8; 8] = b"DFLAYOUT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a layout checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint is truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch: header says {expected:016x}, data hashes to {found:016x}")]
    ChecksumMismatch { expected: u64, found: u64 },
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint tensor shapes do not match its config: {0}")]
    Shape(String),
    #[error("i/o error on checkpoint")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: DenoiserConfig,
    schedule: ScheduleKind,
    timesteps: usize,
    normalizer: Normalizer,
    layout_dim: usize,
    feature_dim: usize,
    time_dim: usize,
    shapes: Vec<(String, usize, usize)>,
    optimizer: Option<OptimizerHeader>,
    train_config: Option<TrainConfig>,
    epoch: usize,
    history: Vec<f64>,
    /// FNV-1a over the tensor section.
    checksum: u64,
}

/// A trained layout model plus, optionally, the optimizer state needed to
/// resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: LayoutModel,
    pub optimizer: Option<Adam>,
    pub train_config: Option<TrainConfig>,
    pub epoch: usize,
    pub history: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn push_tensors(out: &mut Vec<u8>, mats: &[Mat]) {
    for m in mats {
        for &x in &m.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

fn read_tensors(
    data: &[u8],
    pos: &mut usize,
    shapes: &[(String, usize, usize)],
) -> Result<Vec<Mat>, CheckpointError> {
    let mut out = Vec::with_capacity(shapes.len());
    for (_, r, c) in shapes {
        let n = r * c;
        let end = *pos + 4 * n;
        if end > data.len() {
            return Err(CheckpointError::Truncated {
                expected: end,
                found: data.len(),
            });
        }
        let vals = data[*pos..end]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        out.push(Mat::from_vec(*r, *c, vals));
        *pos = end;
    }
    Ok(out)
}

impl Checkpoint {
    /// Inference-only checkpoint.
    pub fn from_model(model: &LayoutModel) -> Self {
        Checkpoint {
            model: model.clone(),
            optimizer: None,
            train_config: None,
            epoch: 0,
            history: Vec::new(),
        }
    }

    pub fn from_trainer(trainer: &Trainer) -> Self {
        Checkpoint {
            model: trainer.model.clone(),
            optimizer: Some(trainer.optimizer.clone()),
            train_config: Some(trainer.config.clone()),
            epoch: trainer.epoch,
            history: trainer.history.clone(),
        }
    }

    /// Restores a trainer; fails if the checkpoint carries no optimizer state.
    pub fn into_trainer(self) -> Result<Trainer, CheckpointError> {
        let (Some(optimizer), Some(config)) = (self.optimizer, self.train_config) else {
            return Err(CheckpointError::Header("checkpoint has no optimizer state".into()));
        };
        Ok(Trainer {
            model: self.model,
            optimizer,
            config,
            epoch: self.epoch,
            history: self.history,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let den = &self.model.denoiser;
        let mut tensors = Vec::new();
        push_tensors(&mut tensors, &den.params);
        if let Some(opt) = &self.optimizer {
            push_tensors(&mut tensors, &opt.m);
            push_tensors(&mut tensors, &opt.v);
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: den.config,
            schedule: self.model.schedule.kind,
            timesteps: self.model.schedule.t,
            normalizer: self.model.normalizer.clone(),
            layout_dim: LAYOUT_DIM,
            feature_dim: FEATURE_DIM,
            time_dim: super::model::TIME_DIM,
            shapes: Denoiser::shapes(den.config),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
            }),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            checksum: fnv1a(&tensors),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + tensors.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&tensors);
        Ok(out)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CheckpointError> {
        if data.len() < MAGIC.len() || &data[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if data.len() < 16 {
            return Err(CheckpointError::Truncated {
                expected: 16,
                found: data.len(),
            });
        }
        let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let hlen = u32::from_le_bytes(data[12..16].try_into().expect("4 bytes")) as usize;
        let body = 16 + hlen;
        if data.len() < body {
            return Err(CheckpointError::Truncated {
                expected: body,
                found: data.len(),
            });
        }
        let header: Header =
            serde_json::from_slice(&data[16..body]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != version {
            return Err(CheckpointError::Header(format!(
                "header version {} disagrees with file version {version}",
                header.format_version
            )));
        }
        if header.layout_dim != LAYOUT_DIM
            || header.feature_dim != FEATURE_DIM
            || header.time_dim != super::model::TIME_DIM
        {
            return Err(CheckpointError::Shape(format!(
                "dims (layout {}, feature {}, time {}) differ from this build",
                header.layout_dim, header.feature_dim, header.time_dim
            )));
        }
        if header.shapes != Denoiser::shapes(header.config) {
            return Err(CheckpointError::Shape("tensor list differs from the denoiser config".into()));
        }
        let n_floats: usize = header.shapes.iter().map(|(_, r, c)| r * c).sum();
        let copies = if header.optimizer.is_some() { 3 } else { 1 };
        let expected = body + 4 * n_floats * copies;
        if data.len() < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: data.len(),
            });
        }
        if data.len() > expected {
            return Err(CheckpointError::Header(format!(
                "{} trailing bytes after tensor data",
                data.len() - expected
            )));
        }
        let found = fnv1a(&data[body..]);
        if found != header.checksum {
            return Err(CheckpointError::ChecksumMismatch {
                expected: header.checksum,
                found,
            });
        }

        let mut pos = body;
        let params = read_tensors(data, &mut pos, &header.shapes)?;
        let optimizer = match &header.optimizer {
            Some(o) => {
                let m = read_tensors(data, &mut pos, &header.shapes)?;
                let v = read_tensors(data, &mut pos, &header.shapes)?;
                Some(Adam {
                    lr: o.lr,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        let denoiser =
            Denoiser::from_params(header.config, params).map_err(|e| CheckpointError::Shape(e.to_string()))?;
        header
            .normalizer
            .check()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let schedule = make_schedule(header.timesteps, header.schedule)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        Ok(Checkpoint {
            model: LayoutModel {
                denoiser,
                normalizer: header.normalizer,
                schedule,
            },
            optimizer,
            train_config: header.train_config,
            epoch: header.epoch,
            history: header.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
