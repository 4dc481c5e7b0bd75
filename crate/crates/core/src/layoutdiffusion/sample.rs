use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::{GraphInput, Normalizer};
use super::schedule::NoiseSchedule;
use super::text::TextEmbedding;
use super::train::LayoutModel;
use super::DiffusionError;
use crate::jawgraph::{validate_source, JawGraph, ToothLayout, LAYOUT_DIM};
use crate::mix_seed;

/// Predicted clean layouts are clipped to this many standard deviations of
/// the training distribution, which keeps early high-noise steps bounded.
pub const X0_CLIP: f64 = 5.0;

/// Smallest box extent a sampled layout may have, mm.
const MIN_EXTENT: f64 = 0.1;

/// Anything that predicts the noise in the current layouts.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        input: &GraphInput,
        x: &[[f64; LAYOUT_DIM]],
        t: usize,
        text: &TextEmbedding,
    ) -> Vec<[f64; LAYOUT_DIM]>;
}

impl NoisePredictor for LayoutModel {
    fn predict_noise(
        &self,
        input: &GraphInput,
        x: &[[f64; LAYOUT_DIM]],
        t: usize,
        text: &TextEmbedding,
    ) -> Vec<[f64; LAYOUT_DIM]> {
        self.denoiser.predict(input, x, t, self.schedule.t, text)
    }
}

/// Fills in the layouts of the missing teeth of `source` by ancestral
/// sampling over `steps` strided timesteps.
pub fn sample_layout(
    model: &LayoutModel,
    source: &JawGraph,
    text: &TextEmbedding,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<JawGraph, DiffusionError> {
    if schedule.t != model.schedule.t {
        return Err(DiffusionError::ScheduleMismatch {
            model: model.schedule.t,
            schedule: schedule.t,
        });
    }
    sample_layout_with(model, &model.normalizer, source, text, schedule, steps, seed)
}

/// [`sample_layout`] with an arbitrary noise predictor.
///
/// Nodes are processed in arch order, and each missing tooth draws its noise
/// from its own stream keyed by `(seed, tooth id)`, so relabeling the input
/// nodes permutes the output exactly. Observed layouts are copied through
/// unchanged.
pub fn sample_layout_with(
    predictor: &impl NoisePredictor,
    norm: &Normalizer,
    source: &JawGraph,
    text: &TextEmbedding,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<JawGraph, DiffusionError> {
    validate_source(source).map_err(|v| {
        DiffusionError::InvalidSource(v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
    })?;
    let input = GraphInput::new(source, norm)?;
    let missing = input.missing_rows();
    if missing.is_empty() {
        return Ok(source.clone());
    }

    let mut rngs: Vec<ChaCha8Rng> = missing
        .iter()
        .map(|&i| ChaCha8Rng::seed_from_u64(mix_seed(&[seed, u64::from(input.ids[i].0)])))
        .collect();
    let mut x = input.source.clone();
    for (&i, rng) in missing.iter().zip(&mut rngs) {
        for c in 0..LAYOUT_DIM {
            x[i][c] = rng.sample(StandardNormal);
        }
    }

    let times = schedule.strided(steps);
    for w in times.windows(2) {
        let (t, s) = (w[0], w[1]);
        let eps = predictor.predict_noise(&input, &x, t, text);
        let (c_t, c_0, var) = schedule.posterior(t, s);
        let (a, sg) = (schedule.alpha[t], schedule.sigma[t]);
        for (&i, rng) in missing.iter().zip(&mut rngs) {
            for c in 0..LAYOUT_DIM {
                let x0 = ((x[i][c] - sg * eps[i][c]) / a).clamp(-X0_CLIP, X0_CLIP);
                let mut next = c_t * x[i][c] + c_0 * x0;
                if s > 0 {
                    let z: f64 = rng.sample(StandardNormal);
                    next += var.sqrt() * z;
                }
                x[i][c] = next;
            }
        }
    }

    let mut out = source.clone();
    for &i in &missing {
        let mut l = ToothLayout::from_array(norm.denormalize(input.categories[i], &x[i])).wrapped();
        l.h = l.h.max(MIN_EXTENT);
        l.w = l.w.max(MIN_EXTENT);
        l.l = l.l.max(MIN_EXTENT);
        out.nodes[input.perm[i]].layout = Some(l);
    }
    Ok(out)
}
