use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::provider::{ScoreProvider, ScoreQuery};
use super::DistillError;
use crate::gsplat::Image;
use crate::layoutdiffusion::nn::{Adam, Mat, Tape, Var};
use crate::layoutdiffusion::{NoiseSchedule, TextEmbedding, TEXT_DIM};
use crate::mix_seed;

/// Input planes: noisy RGB, layout silhouette, timestep.
const IN_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedConfig {
    /// Hidden channels of the two inner convolutions.
    pub channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LearnedConfig {
    fn default() -> Self {
        LearnedConfig {
            channels: 16,
            epochs: 30,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// One clean training image with its conditioning.
#[derive(Debug, Clone)]
pub struct ScoreSample {
    pub image: Image,
    /// Silhouette of the layout boxes, for the scene role.
    pub layout: Option<Image>,
    pub text: TextEmbedding,
}

/// Three 3x3 convolutions (SiLU between) predicting the noise in a noisy
/// render. The prompt embedding is projected into the first layer's bias.
#[derive(Debug, Clone)]
pub struct LearnedScore {
    pub config: LearnedConfig,
    pub params: Vec<Mat>,
}

/// Row of every 3x3 neighbor for each pixel, clamped into the image, and a
/// matching 0/1 mask for zero padding.
struct Stencil {
    idx: [Vec<usize>; 9],
    mask: [Vec<f64>; 9],
}

impl Stencil {
    fn new(w: usize, h: usize) -> Self {
        let mut idx: [Vec<usize>; 9] = Default::default();
        let mut mask: [Vec<f64>; 9] = Default::default();
        for k in 0..9 {
            let (dx, dy) = ((k % 3) as isize - 1, (k / 3) as isize - 1);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (nx, ny) = (x + dx, y + dy);
                    let inside = nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize;
                    idx[k].push(if inside { (ny * w as isize + nx) as usize } else { 0 });
                    mask[k].push(if inside { 1.0 } else { 0.0 });
                }
            }
        }
        Stencil { idx, mask }
    }

    /// 'same' convolution of a pixels x c input.
    fn conv(&self, tape: &mut Tape<'_>, x: Var, weight: Var, bias: Var) -> Var {
        let c = tape.value(x).cols;
        let mut parts = Vec::with_capacity(9);
        for k in 0..9 {
            let g = tape.gather(x, self.idx[k].clone());
            let mut m = Mat::zeros(self.mask[k].len(), c);
            for (row, &on) in m.data.chunks_mut(c).zip(&self.mask[k]) {
                row.fill(on);
            }
            let m = tape.constant(m);
            parts.push(tape.mul(g, m));
        }
        let cols = tape.hcat(&parts);
        let y = tape.matmul(cols, weight);
        tape.add_row(y, bias)
    }
}

impl LearnedScore {
    pub fn shapes(channels: usize) -> Vec<(usize, usize)> {
        vec![
            (9 * IN_CHANNELS, channels),
            (1, channels),
            (TEXT_DIM, channels),
            (9 * channels, channels),
            (1, channels),
            (9 * channels, 3),
            (1, 3),
        ]
    }

    pub fn new(config: LearnedConfig) -> Result<Self, DistillError> {
        if config.channels == 0 || !(config.lr > 0.0) {
            return Err(DistillError::Config("learned score needs channels > 0 and lr > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 11]));
        let params = Self::shapes(config.channels)
            .into_iter()
            .enumerate()
            .map(|(i, (r, c))| {
                if i % 2 == 1 || i == 6 {
                    Mat::zeros(r, c)
                } else {
                    Mat::randn(r, c, (1.0 / r as f64).sqrt(), &mut rng)
                }
            })
            .collect();
        Ok(LearnedScore { config, params })
    }

    fn input(z: &Image, layout: Option<&Image>, t: usize, big_t: usize) -> Mat {
        let n = z.width * z.height;
        let tf = t as f64 / big_t as f64;
        let mut m = Mat::zeros(n, IN_CHANNELS);
        for p in 0..n {
            let row = &mut m.data[p * IN_CHANNELS..(p + 1) * IN_CHANNELS];
            row[..3].copy_from_slice(&z.data[p * 3..p * 3 + 3]);
            row[3] = layout.map_or(0.0, |l| l.data[p * 3]);
            row[4] = tf;
        }
        m
    }

    fn forward(&self, tape: &mut Tape<'_>, input: Mat, text: &TextEmbedding, stencil: &Stencil) -> Var {
        let p: Vec<Var> = (0..self.params.len()).map(|i| tape.param(i)).collect();
        let x = tape.constant(input);
        let txt = tape.constant(Mat::from_vec(1, TEXT_DIM, text.vector.clone()));
        let proj = tape.matmul(txt, p[2]);
        let b1 = tape.add(p[1], proj);
        let h = stencil.conv(tape, x, p[0], b1);
        let h = tape.silu(h);
        let h = stencil.conv(tape, h, p[3], p[4]);
        let h = tape.silu(h);
        stencil.conv(tape, h, p[5], p[6])
    }

    fn check_shapes(z: &Image, layout: Option<&Image>) -> Result<(), DistillError> {
        if let Some(l) = layout {
            if !l.same_shape(z) {
                return Err(DistillError::ProviderShape {
                    want_w: z.width,
                    want_h: z.height,
                    got_w: l.width,
                    got_h: l.height,
                });
            }
        }
        Ok(())
    }

    /// Predicted noise for latent `z` at timestep `t` of a `big_t`-step schedule.
    pub fn predict(
        &self,
        z: &Image,
        layout: Option<&Image>,
        t: usize,
        big_t: usize,
        text: &TextEmbedding,
    ) -> Result<Image, DistillError> {
        Self::check_shapes(z, layout)?;
        let stencil = Stencil::new(z.width, z.height);
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, Self::input(z, layout, t, big_t), text, &stencil);
        Ok(Image {
            width: z.width,
            height: z.height,
            data: tape.value(out).data.clone(),
        })
    }

    /// Noise-prediction MSE of one noised sample and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        sample: &ScoreSample,
        schedule: &NoiseSchedule,
        t: usize,
        eps: &Image,
    ) -> Result<(f64, Vec<Mat>), DistillError> {
        if !eps.same_shape(&sample.image) {
            return Err(DistillError::ProviderShape {
                want_w: sample.image.width,
                want_h: sample.image.height,
                got_w: eps.width,
                got_h: eps.height,
            });
        }
        Self::check_shapes(&sample.image, sample.layout.as_ref())?;
        let z = Image {
            width: eps.width,
            height: eps.height,
            data: sample
                .image
                .data
                .iter()
                .zip(&eps.data)
                .map(|(x, e)| schedule.alpha[t] * x + schedule.sigma[t] * e)
                .collect(),
        };
        let stencil = Stencil::new(z.width, z.height);
        let mut tape = Tape::new(&self.params);
        let input = Self::input(&z, sample.layout.as_ref(), t, schedule.t);
        let out = self.forward(&mut tape, input, &sample.text, &stencil);
        let n = z.width * z.height;
        let target = Rc::new(Mat::from_vec(n, 3, eps.data.clone()));
        let loss = tape.masked_mse(out, target, (0..n).collect());
        let value = tape.value(loss).data[0];
        let grads = tape
            .backward(loss)
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Mat::zeros(p.rows, p.cols)))
            .collect();
        Ok((value, grads))
    }

    /// Trains on noised copies of `samples`; returns the mean loss per epoch.
    /// Each sample gets one Adam step per epoch, in a seeded order.
    pub fn train(
        &mut self,
        samples: &[ScoreSample],
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>, DistillError> {
        if samples.is_empty() {
            return Err(DistillError::Config("no training samples for the learned score".into()));
        }
        let mut opt = Adam::new(&self.params, self.config.lr);
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, epoch as u64, 12]));
            let mut order: Vec<usize> = (0..samples.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let mut total = 0.0;
            for &i in &order {
                let s = &samples[i];
                let t = rng.random_range(1..=schedule.t);
                let eps = Image {
                    width: s.image.width,
                    height: s.image.height,
                    data: (0..s.image.data.len()).map(|_| rng.sample(StandardNormal)).collect(),
                };
                let (loss, grads) = self.loss_and_grad(s, schedule, t, &eps)?;
                if !loss.is_finite() {
                    return Err(DistillError::NonFinite {
                        epoch,
                        term: format!("learned score loss (sample {i})"),
                    });
                }
                opt.update(&mut self.params, &grads);
                total += loss;
            }
            history.push(total / samples.len() as f64);
        }
        Ok(history)
    }
}

impl ScoreProvider for LearnedScore {
    fn predict_noise(&self, query: &ScoreQuery<'_>) -> Result<Image, DistillError> {
        self.predict(query.z, query.layout, query.t, query.schedule.t, query.text)
    }
}
