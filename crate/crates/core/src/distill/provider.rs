use std::collections::BTreeMap;
use std::fmt;

use nalgebra::Vector3;

use super::DistillError;
use crate::gsplat::{render_scene, Camera, Image, Rasterizer, SceneGaussians};
use crate::jawgraph::ToothId;
use crate::layoutdiffusion::{NoiseSchedule, TextEmbedding};

/// Identifies a rendered view: a scene camera (`tooth == None`) or a camera
/// of one tooth's instance orbit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ViewKey {
    pub tooth: Option<ToothId>,
    pub view: usize,
}

impl ViewKey {
    pub fn scene(view: usize) -> Self {
        ViewKey { tooth: None, view }
    }

    pub fn instance(tooth: ToothId, view: usize) -> Self {
        ViewKey {
            tooth: Some(tooth),
            view,
        }
    }
}

impl fmt::Display for ViewKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tooth {
            Some(t) => write!(f, "tooth {t} view {}", self.view),
            None => write!(f, "scene view {}", self.view),
        }
    }
}

/// Everything a provider may condition on when predicting noise.
pub struct ScoreQuery<'a> {
    /// Noisy latent `alpha z0 + sigma eps`.
    pub z: &'a Image,
    /// The injected noise. Only oracle providers read it.
    pub eps: &'a Image,
    pub t: usize,
    pub schedule: &'a NoiseSchedule,
    pub text: &'a TextEmbedding,
    /// Silhouette render of the current layouts (scene role only).
    pub layout: Option<&'a Image>,
    pub camera: &'a Camera,
    pub key: ViewKey,
}

/// A model that predicts the noise in a noisy render. Latents are pixels:
/// the encoder is the identity.
pub trait ScoreProvider: Sync {
    fn predict_noise(&self, query: &ScoreQuery<'_>) -> Result<Image, DistillError>;

    /// Weighting of the residual at timestep `t`; `sigma_t^2` by default.
    fn weight(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        schedule.sigma[t] * schedule.sigma[t]
    }
}

/// Predicts the noise that would turn each view's target image into the
/// query latent, so the distillation residual is a scaled photometric error.
#[derive(Debug, Clone, Default)]
pub struct ReferenceScore {
    targets: BTreeMap<ViewKey, Image>,
}

impl ReferenceScore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ViewKey, target: Image) {
        self.targets.insert(key, target);
    }

    /// Targets rendered from ground-truth Gaussians on a white background:
    /// the whole scene for each scene camera, and each tooth alone for the
    /// cameras of its instance orbit.
    pub fn from_truth(
        truth: &SceneGaussians,
        scene_cameras: &[Camera],
        instance_cameras: &BTreeMap<ToothId, Vec<Camera>>,
    ) -> Result<Self, DistillError> {
        let bg = Vector3::repeat(1.0);
        let mut out = Self::new();
        for (v, cam) in scene_cameras.iter().enumerate() {
            out.insert(ViewKey::scene(v), render_scene(truth, cam, bg)?.image);
        }
        for (&id, cams) in instance_cameras {
            let i = truth.find(id).ok_or(DistillError::UnknownTooth(id))?;
            for (v, cam) in cams.iter().enumerate() {
                let frame = Rasterizer::new(cam.clone(), bg)?.render(&[&truth.teeth[i]])?;
                out.insert(ViewKey::instance(id, v), frame.image);
            }
        }
        Ok(out)
    }

    /// Scene targets for views `0..n`, if all are present.
    pub fn scene_targets(&self, n: usize) -> Option<Vec<Image>> {
        (0..n).map(|v| self.target(ViewKey::scene(v)).cloned()).collect()
    }

    pub fn target(&self, key: ViewKey) -> Option<&Image> {
        self.targets.get(&key)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl ScoreProvider for ReferenceScore {
    fn predict_noise(&self, q: &ScoreQuery<'_>) -> Result<Image, DistillError> {
        let target = self.targets.get(&q.key).ok_or(DistillError::MissingTarget(q.key))?;
        if !target.same_shape(q.z) {
            return Err(DistillError::ProviderShape {
                want_w: q.z.width,
                want_h: q.z.height,
                got_w: target.width,
                got_h: target.height,
            });
        }
        let (a, s) = (q.schedule.alpha[q.t], q.schedule.sigma[q.t]);
        let mut out = q.z.clone();
        for (o, x) in out.data.iter_mut().zip(&target.data) {
            *o = (*o - a * x) / s;
        }
        Ok(out)
    }
}

/// Returns the injected noise exactly, so every distillation gradient is zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectScore;

impl ScoreProvider for PerfectScore {
    fn predict_noise(&self, q: &ScoreQuery<'_>) -> Result<Image, DistillError> {
        Ok(q.eps.clone())
    }
}
