use std::rc::Rc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{missing_prompt, Denoiser, DenoiserConfig, GraphInput, Normalizer};
use super::nn::{Adam, Mat, Tape};
use super::schedule::{forward_noise, kl_term, NoiseSchedule};
use super::text::{embed_text, TextEmbedding};
use super::DiffusionError;
use crate::jawgraph::{JawGraph, LAYOUT_DIM};
use crate::mix_seed;
use crate::synthjaw::mask_missing;

/// A trained denoiser with the schedule and normalization it expects.
#[derive(Debug, Clone)]
pub struct LayoutModel {
    pub denoiser: Denoiser,
    pub normalizer: Normalizer,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Passes over the dataset.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Range of teeth masked per training jaw.
    pub min_missing: usize,
    pub max_missing: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Learning rate at the last epoch as a fraction of `lr`, reached by
    /// cosine decay. 1 keeps the rate constant.
    pub lr_final_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            min_missing: 1,
            max_missing: 4,
            grad_clip: 1.0,
            lr_final_frac: 0.05,
        }
    }
}

/// A complete jaw (`target`) and a copy with some teeth removed (`source`).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: usize,
    pub target: JawGraph,
    pub source: JawGraph,
    pub text: TextEmbedding,
}

/// Masks a random set of teeth in every jaw. Deterministic in
/// `(seed, epoch)`; example order is shuffled per epoch.
pub fn make_examples(
    dataset: &[JawGraph],
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<TrainExample>, DiffusionError> {
    let mut out = Vec::with_capacity(dataset.len());
    for (j, jaw) in dataset.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, j as u64, 1]));
        let present: Vec<_> = jaw.nodes.iter().filter(|n| !n.missing).map(|n| n.tooth_id).collect();
        let hi = config.max_missing.min(present.len().saturating_sub(1));
        let lo = config.min_missing.min(hi);
        let count = rng.random_range(lo..=hi);
        let chosen: Vec<_> = present.choose_multiple(&mut rng, count).copied().collect();
        let (source, _) = mask_missing(jaw, &chosen)?;
        let text = embed_text(&missing_prompt(&source))?;
        out.push(TrainExample {
            id: j,
            target: jaw.clone(),
            source,
            text,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, 2]));
    out.shuffle(&mut rng);
    Ok(out)
}

/// One training example after forward noising, in canonical node order.
#[derive(Debug, Clone)]
pub struct NoisedExample {
    pub input: GraphInput,
    pub t: usize,
    /// Clean normalized layouts: observed rows from the source, missing rows
    /// from the target.
    pub x0: Vec<[f64; LAYOUT_DIM]>,
    /// Noisy layouts; observed rows equal `x0`.
    pub xt: Vec<[f64; LAYOUT_DIM]>,
    /// Injected noise; zero on observed rows.
    pub eps: Mat,
}

/// Draws `t` uniformly from `1..=T` and noises the missing rows of `ex`.
pub fn noise_example(model: &LayoutModel, ex: &TrainExample, seed: u64) -> Result<NoisedExample, DiffusionError> {
    let norm = &model.normalizer;
    let sched = &model.schedule;
    let input = GraphInput::new(&ex.source, norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=sched.t);
    let n = input.len();
    let mut x0 = input.source.clone();
    let mut eps = Mat::zeros(n, LAYOUT_DIM);
    for i in input.missing_rows() {
        let idx = ex.target.find(input.ids[i]).ok_or_else(|| {
            DiffusionError::Shape(format!("tooth {} absent from target graph", input.ids[i]))
        })?;
        let layout = ex.target.nodes[idx]
            .layout
            .ok_or_else(|| DiffusionError::Shape(format!("target tooth {} has no layout", input.ids[i])))?;
        x0[i] = norm.normalize(input.categories[i], &layout);
        for c in 0..LAYOUT_DIM {
            *eps.at_mut(i, c) = rng.sample(StandardNormal);
        }
    }
    let noised: Vec<bool> = input.observed.iter().map(|o| !o).collect();
    let rows: Vec<[f64; LAYOUT_DIM]> = (0..n).map(|i| std::array::from_fn(|c| eps.at(i, c))).collect();
    let xt = forward_noise(&x0, &noised, t, &rows, sched)?;
    Ok(NoisedExample { input, t, x0, xt, eps })
}

/// Mean squared error between predicted and injected noise over the
/// missing-node channels.
pub fn noise_mse(pred: &[[f64; LAYOUT_DIM]], noised: &NoisedExample) -> f64 {
    let rows = noised.input.missing_rows();
    if rows.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for &i in &rows {
        for c in 0..LAYOUT_DIM {
            s += (pred[i][c] - noised.eps.at(i, c)).powi(2);
        }
    }
    s / (rows.len() * LAYOUT_DIM) as f64
}

/// Noise-prediction loss of one example and its parameter gradients.
fn example_loss(
    model: &LayoutModel,
    ex: &TrainExample,
    seed: u64,
    dropout: bool,
) -> Result<(f64, Vec<Option<Mat>>), DiffusionError> {
    let noised = noise_example(model, ex, seed)?;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 3]));
    let mut tape = Tape::new(&model.denoiser.params);
    let pred = model.denoiser.forward(
        &mut tape,
        &noised.input,
        &noised.xt,
        noised.t,
        model.schedule.t,
        &ex.text,
        dropout.then_some(&mut drop_rng),
    );
    let rows = noised.input.missing_rows();
    let loss = tape.masked_mse(pred, Rc::new(noised.eps), rows);
    let value = tape.value(loss).data[0];
    Ok((value, tape.backward(loss)))
}

/// Mean noise-prediction MSE over the missing-node channels of `batch` and
/// its gradient with respect to every denoiser parameter. Examples are
/// evaluated in parallel and reduced in batch order.
pub fn train_step(
    model: &LayoutModel,
    batch: &[TrainExample],
    seed: u64,
    dropout: bool,
) -> Result<(f64, Vec<Mat>), DiffusionError> {
    let results: Vec<Result<(f64, Vec<Option<Mat>>), DiffusionError>> = batch
        .par_iter()
        .enumerate()
        .map(|(k, ex)| example_loss(model, ex, mix_seed(&[seed, k as u64, ex.id as u64]), dropout))
        .collect();
    let params = &model.denoiser.params;
    let mut grads: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    let mut total = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for (r, ex) in results.into_iter().zip(batch) {
        let (loss, g) = r?;
        if !loss.is_finite() {
            return Err(DiffusionError::NonFiniteLoss {
                sample: ex.id,
                epoch: 0,
            });
        }
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(g) {
            if let Some(gi) = gi {
                for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                    *a += scale * b;
                }
            }
        }
    }
    Ok((total * scale, grads))
}

/// Monte-Carlo estimate of the variational bound terms `L_{t-1}` summed over
/// the missing nodes of `examples`, averaged over examples. Diagnostic only.
pub fn vlb_estimate(model: &LayoutModel, examples: &[TrainExample], seed: u64) -> Result<f64, DiffusionError> {
    let sched = &model.schedule;
    let mut total = 0.0;
    for (k, ex) in examples.iter().enumerate() {
        let noised = noise_example(model, ex, mix_seed(&[seed, k as u64]))?;
        let eps_hat = model
            .denoiser
            .predict(&noised.input, &noised.xt, noised.t, sched.t, &ex.text);
        // the bound weights each of the T terms equally
        for i in noised.input.missing_rows() {
            total += sched.t as f64 * kl_term(sched, &noised.x0[i], &noised.xt[i], &eps_hat[i], noised.t);
        }
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Adam training loop over a fixed dataset of complete jaws.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: LayoutModel,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean loss of each completed epoch.
    pub history: Vec<f64>,
}

impl Trainer {
    pub fn new(
        dataset: &[JawGraph],
        denoiser: DenoiserConfig,
        schedule: NoiseSchedule,
        config: TrainConfig,
    ) -> Result<Self, DiffusionError> {
        if config.batch_size == 0 {
            return Err(DiffusionError::Config("batch_size must be positive".into()));
        }
        if dataset.is_empty() {
            return Err(DiffusionError::Config("training set is empty".into()));
        }
        let denoiser = Denoiser::new(denoiser, mix_seed(&[config.seed, 4]))?;
        let optimizer = Adam::new(&denoiser.params, config.lr);
        Ok(Trainer {
            model: LayoutModel {
                denoiser,
                normalizer: Normalizer::fit(dataset),
                schedule,
            },
            optimizer,
            config,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Learning rate used during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let c = &self.config;
        let frac = if c.epochs > 1 {
            (epoch.min(c.epochs - 1)) as f64 / (c.epochs - 1) as f64
        } else {
            0.0
        };
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        c.lr * (c.lr_final_frac + (1.0 - c.lr_final_frac) * cos)
    }

    /// Runs one epoch and returns its mean batch loss.
    pub fn run_epoch(&mut self, dataset: &[JawGraph]) -> Result<f64, DiffusionError> {
        self.optimizer.lr = self.lr_at(self.epoch);
        let examples = make_examples(dataset, &self.config, self.epoch)?;
        let mut losses = Vec::new();
        for (b, batch) in examples.chunks(self.config.batch_size).enumerate() {
            let seed = mix_seed(&[self.config.seed, self.epoch as u64, b as u64, 5]);
            let (loss, mut grads) = train_step(&self.model, batch, seed, true).map_err(|e| match e {
                DiffusionError::NonFiniteLoss { sample, .. } => DiffusionError::NonFiniteLoss {
                    sample,
                    epoch: self.epoch,
                },
                e => e,
            })?;
            if self.config.grad_clip > 0.0 {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data.iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > self.config.grad_clip {
                    let s = self.config.grad_clip / norm;
                    grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|x| *x *= s));
                }
            }
            self.optimizer.update(&mut self.model.denoiser.params, &grads);
            losses.push(loss);
        }
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        self.epoch += 1;
        self.history.push(mean);
        Ok(mean)
    }

    /// Runs the remaining epochs up to `config.epochs`, reporting each.
    pub fn train(
        &mut self,
        dataset: &[JawGraph],
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<(), DiffusionError> {
        while self.epoch < self.config.epochs {
            let loss = self.run_epoch(dataset)?;
            on_epoch(self.epoch, loss);
        }
        Ok(())
    }
}
