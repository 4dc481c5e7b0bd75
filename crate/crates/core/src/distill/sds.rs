use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use super::provider::{ScoreProvider, ScoreQuery, ViewKey};
use super::DistillError;
use crate::gsplat::{Camera, GaussianGrad, Image, Rasterizer, SceneGaussians, ToothGaussians};
use crate::layoutdiffusion::{NoiseSchedule, TextEmbedding};

/// Per-view inputs of one distillation step.
#[derive(Clone, Copy)]
pub struct SdsStep<'a> {
    pub t: usize,
    pub eps: &'a Image,
    pub schedule: &'a NoiseSchedule,
    pub text: &'a TextEmbedding,
    pub key: ViewKey,
    /// Multiplier on the residual.
    pub guidance: f64,
}

#[derive(Debug, Clone)]
pub struct SdsOutput {
    /// Gradient for every Gaussian, indexed like the rendered teeth.
    pub grads: Vec<Vec<GaussianGrad>>,
    /// `w(t) * mean((eps_hat - eps)^2)`, a monitoring quantity.
    pub residual: f64,
    /// The clean render on a white background.
    pub image: Image,
}

/// Standard-normal image.
pub fn draw_noise(width: usize, height: usize, rng: &mut impl Rng) -> Image {
    Image {
        width,
        height,
        data: (0..width * height * 3).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

fn sds_core(
    teeth: &[&ToothGaussians],
    cam: &Camera,
    provider: &dyn ScoreProvider,
    layout: Option<&Image>,
    step: &SdsStep<'_>,
) -> Result<SdsOutput, DistillError> {
    let sched = step.schedule;
    if step.t == 0 || step.t > sched.t {
        return Err(DistillError::Timestep { t: step.t, max: sched.t });
    }
    let frame = Rasterizer::new(cam.clone(), Vector3::repeat(1.0))?.render(teeth)?;
    let shape_err = |img: &Image| DistillError::ProviderShape {
        want_w: cam.width,
        want_h: cam.height,
        got_w: img.width,
        got_h: img.height,
    };
    if !step.eps.same_shape(&frame.image) {
        return Err(shape_err(step.eps));
    }
    let (a, s) = (sched.alpha[step.t], sched.sigma[step.t]);
    let mut z = frame.image.clone();
    for (zi, e) in z.data.iter_mut().zip(&step.eps.data) {
        *zi = a * *zi + s * e;
    }
    let eps_hat = provider.predict_noise(&ScoreQuery {
        z: &z,
        eps: step.eps,
        t: step.t,
        schedule: sched,
        text: step.text,
        layout,
        camera: cam,
        key: step.key,
    })?;
    if !eps_hat.same_shape(&frame.image) {
        return Err(shape_err(&eps_hat));
    }
    let w = provider.weight(sched, step.t);
    let mut sq = 0.0;
    let d_image: Vec<f64> = eps_hat
        .data
        .iter()
        .zip(&step.eps.data)
        .map(|(p, e)| {
            let r = p - e;
            sq += r * r;
            step.guidance * w * r
        })
        .collect();
    let grads = frame.backward(teeth, &d_image)?;
    Ok(SdsOutput {
        grads,
        residual: w * sq / d_image.len().max(1) as f64,
        image: frame.image,
    })
}

/// Distillation gradient for the Gaussians of one tooth rendered alone.
pub fn sds_grad_instance(
    tooth: &ToothGaussians,
    cam: &Camera,
    provider: &dyn ScoreProvider,
    step: &SdsStep<'_>,
) -> Result<SdsOutput, DistillError> {
    sds_core(&[tooth], cam, provider, None, step)
}

/// Distillation gradient for every Gaussian of the scene, with the layout
/// silhouette as extra conditioning.
pub fn sds_grad_scene(
    scene: &SceneGaussians,
    cam: &Camera,
    provider: &dyn ScoreProvider,
    layout: &Image,
    step: &SdsStep<'_>,
) -> Result<SdsOutput, DistillError> {
    sds_core(&scene.refs(), cam, provider, Some(layout), step)
}
