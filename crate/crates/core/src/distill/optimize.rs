use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::provider::{ScoreProvider, ViewKey};
use super::sds::{draw_noise, sds_grad_instance, sds_grad_scene, SdsStep};
use super::DistillError;
use crate::collision::{arch_sequence, penetration_distance, scene_collision};
use crate::gsplat::{
    layout_from_gaussians, orbit_cameras, render_layout_silhouette, Camera, GaussianGrad, Image, OrbitSpec,
    ParamGroup, SceneGaussians, PARAMS_PER_GAUSSIAN,
};
use crate::jawgraph::{ToothId, ToothLayout};
use crate::layoutdiffusion::{embed_text, NoiseSchedule, TextEmbedding};
use crate::metrics::psnr;
use crate::mix_seed;

/// Per-group Adam learning rates. Colors switch to `color_final` after
/// epoch `color_decay_epoch` (epochs count from 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub color_final: f64,
    pub color_decay_epoch: usize,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            color: 5e-3,
            color_final: 5e-4,
            color_decay_epoch: 380,
        }
    }
}

impl LearningRates {
    /// Learning rate of every Gaussian parameter during `epoch`.
    fn per_param(&self, epoch: usize, position_scale: f64) -> GaussianGrad {
        let mut out = [0.0; PARAMS_PER_GAUSSIAN];
        for g in ParamGroup::ALL {
            let lr = match g {
                ParamGroup::Position => self.position * position_scale,
                ParamGroup::Scale => self.scale,
                ParamGroup::Rotation => self.rotation,
                ParamGroup::Opacity => self.opacity,
                ParamGroup::Color if epoch > self.color_decay_epoch => self.color_final,
                ParamGroup::Color => self.color,
            };
            out[g.range()].fill(lr);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the per-tooth distillation terms.
    pub lambda1: f64,
    /// Weight of the whole-scene distillation term.
    pub lambda2: f64,
    pub lr: LearningRates,
    /// Multiply the position rate by the initial scene radius (mm), so the
    /// rate is relative to scene size.
    pub position_lr_by_extent: bool,
    pub max_epochs: usize,
    /// Stop once the total loss varies by less than `stop_rel_tol` (relative
    /// to its mean) over the last `stop_window` epochs.
    pub stop_window: usize,
    pub stop_rel_tol: f64,
    pub guidance_instance: f64,
    pub guidance_scene: f64,
    /// Timesteps are drawn uniformly from `[t_min_frac T, t_max_frac T]`.
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub collision: bool,
    /// Leave teeth that are not missing untouched in the scene pass.
    pub freeze_present: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda1: 10.0,
            lambda2: 2.5,
            lr: LearningRates::default(),
            position_lr_by_extent: true,
            max_epochs: 400,
            stop_window: 10,
            stop_rel_tol: 1e-3,
            guidance_instance: 50.0,
            guidance_scene: 100.0,
            t_min_frac: 0.02,
            t_max_frac: 0.98,
            collision: true,
            freeze_present: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::Config(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        let lr = &self.lr;
        if [lr.position, lr.opacity, lr.scale, lr.rotation, lr.color, lr.color_final]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0 < self.t_min_frac && self.t_min_frac <= self.t_max_frac && self.t_max_frac <= 1.0) {
            return bad("need 0 < t_min_frac <= t_max_frac <= 1");
        }
        if self.stop_window < 2 {
            return bad("stop_window must be at least 2");
        }
        if !(self.guidance_instance >= 0.0 && self.guidance_scene >= 0.0) {
            return bad("guidance scales must be non-negative");
        }
        Ok(())
    }
}

/// Weighted sum of the distillation monitors and collision losses.
pub fn total_loss(instance: &[f64], scene: f64, collision: &[f64], lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * instance.iter().sum::<f64>() + lambda2 * scene + collision.iter().sum::<f64>()
}

/// One line of the optimization trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub sds_scene: f64,
    pub sds_instance_sum: f64,
    pub collision_sum: f64,
    pub pd_mm: f64,
    /// Mean PSNR of the scene-pass renders against the monitor targets.
    pub psnr_db: Option<f64>,
}

/// Adam moments for every Gaussian parameter, with a step count per tooth.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Vec<GaussianGrad>>,
    pub v: Vec<Vec<GaussianGrad>>,
    pub steps: Vec<u64>,
    pub epoch: usize,
    /// Total loss of recent epochs, oldest first.
    pub history: Vec<f64>,
}

impl OptimState {
    pub fn new(scene: &SceneGaussians) -> Self {
        let zeros: Vec<Vec<GaussianGrad>> = scene
            .teeth
            .iter()
            .map(|t| vec![[0.0; PARAMS_PER_GAUSSIAN]; t.gaussians.len()])
            .collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; scene.teeth.len()],
            epoch: 0,
            history: Vec::new(),
        }
    }

    fn step(
        &mut self,
        scene: &mut SceneGaussians,
        tooth: usize,
        grads: &[GaussianGrad],
        lr: &GaussianGrad,
        config: &DistillConfig,
    ) {
        self.steps[tooth] += 1;
        let n = self.steps[tooth] as i32;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let c1 = 1.0 - b1.powi(n);
        let c2 = 1.0 - b2.powi(n);
        let t = &mut scene.teeth[tooth];
        for (gi, g) in t.gaussians.iter_mut().enumerate() {
            let mut p = g.to_params();
            let (m, v) = (&mut self.m[tooth][gi], &mut self.v[tooth][gi]);
            for k in 0..PARAMS_PER_GAUSSIAN {
                let d = grads[gi][k];
                m[k] = b1 * m[k] + (1.0 - b1) * d;
                v[k] = b2 * v[k] + (1.0 - b2) * d * d;
                p[k] -= lr[k] * (m[k] / c1) / ((v[k] / c2).sqrt() + config.adam_eps);
            }
            *g = crate::gsplat::Gaussian3D::from_params(&p);
        }
    }
}

/// Everything `optimize` needs besides the scene and config.
pub struct OptimizeInputs<'a> {
    pub scene_cameras: &'a [Camera],
    /// Orbit of each missing tooth for the instance pass.
    pub instance_cameras: &'a BTreeMap<ToothId, Vec<Camera>>,
    pub missing: &'a [ToothId],
    pub scene_text: &'a TextEmbedding,
    pub scene_provider: &'a dyn ScoreProvider,
    pub instance_provider: &'a dyn ScoreProvider,
    pub schedule: &'a NoiseSchedule,
    /// Target renders for the scene cameras, used only for the PSNR trace.
    pub monitor: Option<&'a [Image]>,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub scene: SceneGaussians,
    pub trace: Vec<TraceRecord>,
    pub stopped_early: bool,
    /// PSNR of the final scene against the monitor targets.
    pub final_psnr_db: Option<f64>,
}

/// Prompt used for the instance role of a tooth.
pub fn tooth_prompt(id: ToothId) -> String {
    let name = match id.position() {
        1 => "central incisor",
        2 => "lateral incisor",
        3 => "canine",
        4 => "first premolar",
        5 => "second premolar",
        6 => "first molar",
        7 => "second molar",
        _ => "third molar",
    };
    format!("a single {name} tooth {}", id.0)
}

/// Orbit around a tooth's layout box for the instance pass.
pub fn instance_cameras(layout: &ToothLayout, spec: &OrbitSpec) -> Vec<Camera> {
    orbit_cameras(spec, layout.center(), layout.half_extents().norm())
}

fn scene_radius(scene: &SceneGaussians) -> f64 {
    let pts: Vec<Vector3<f64>> = scene
        .teeth
        .iter()
        .flat_map(|t| t.gaussians.iter().map(|g| g.center))
        .collect();
    if pts.is_empty() {
        return 1.0;
    }
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max).max(1e-6)
}

fn draw_t(rng: &mut impl Rng, schedule: &NoiseSchedule, config: &DistillConfig) -> usize {
    let big_t = schedule.t as f64;
    let lo = ((config.t_min_frac * big_t).ceil() as usize).clamp(1, schedule.t);
    let hi = ((config.t_max_frac * big_t).floor() as usize).clamp(lo, schedule.t);
    rng.random_range(lo..=hi)
}

fn check_finite(grads: &[Vec<GaussianGrad>], residual: f64, epoch: usize, term: impl Fn() -> String) -> Result<(), DistillError> {
    if residual.is_finite() && grads.iter().flatten().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DistillError::NonFinite { epoch, term: term() })
    }
}

/// Collision gradient for the centers of tooth `i` (index into `scene`),
/// with its arch neighbors taken from `snapshot` and tooth `i` from `scene`.
/// `order` is [`arch_sequence`] of the scene.
pub fn neighbor_collision_grad(
    scene: &SceneGaussians,
    snapshot: &SceneGaussians,
    order: &[usize],
    i: usize,
) -> Vec<Vector3<f64>> {
    let pos = order.iter().position(|&j| j == i).expect("tooth in arch order");
    let mut sub = Vec::with_capacity(3);
    if pos > 0 {
        sub.push(snapshot.teeth[order[pos - 1]].clone());
    }
    let me = sub.len();
    sub.push(scene.teeth[i].clone());
    if let Some(&j) = order.get(pos + 1) {
        sub.push(snapshot.teeth[j].clone());
    }
    let (_, grads) = scene_collision(&SceneGaussians::new(sub));
    grads.into_iter().nth(me).expect("anchor present")
}

/// Instance-pass gradient of one tooth: `lambda1 * sds + collision`, with
/// collision acting on centers only. Absent terms count as zero.
pub fn instance_gradient(
    n: usize,
    sds: Option<&[GaussianGrad]>,
    collision: Option<&[Vector3<f64>]>,
    lambda1: f64,
) -> Vec<GaussianGrad> {
    let mut out = vec![[0.0; PARAMS_PER_GAUSSIAN]; n];
    if let Some(sds) = sds {
        for (dst, src) in out.iter_mut().zip(sds) {
            *dst = src.map(|x| lambda1 * x);
        }
    }
    if let Some(col) = collision {
        for (dst, c) in out.iter_mut().zip(col) {
            for k in 0..3 {
                dst[k] += c[k];
            }
        }
    }
    out
}

/// Alternating scene/instance distillation with collision regularization.
///
/// Each epoch runs a scene pass (one update of all optimized teeth per scene
/// camera), then an instance pass (one update of each missing tooth per
/// camera of its orbit, adding the collision gradient), then refits the
/// layout boxes of updated teeth. Noise and timesteps come from streams keyed
/// by `(seed, epoch, pass, view)`, so runs are reproducible.
pub fn optimize(
    mut scene: SceneGaussians,
    inputs: &OptimizeInputs<'_>,
    config: &DistillConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&TraceRecord),
) -> Result<OptimizeResult, DistillError> {
    config.validate()?;
    scene.check().map_err(DistillError::Config)?;
    if inputs.scene_cameras.is_empty() && config.lambda2 > 0.0 {
        return Err(DistillError::NoCameras("the scene pass".into()));
    }
    let missing_idx: Vec<usize> = inputs
        .missing
        .iter()
        .map(|id| scene.find(*id).ok_or(DistillError::UnknownTooth(*id)))
        .collect::<Result<_, _>>()?;
    let mut instance_text = BTreeMap::new();
    for &id in inputs.missing {
        let cams = inputs.instance_cameras.get(&id).map_or(0, Vec::len);
        if cams == 0 && config.lambda1 > 0.0 {
            return Err(DistillError::NoCameras(format!("tooth {id}")));
        }
        instance_text.insert(id, embed_text(&tooth_prompt(id)).expect("prompt has tokens"));
    }
    if let Some(m) = inputs.monitor {
        if m.len() != inputs.scene_cameras.len() {
            return Err(DistillError::Config(format!(
                "{} monitor images for {} scene cameras",
                m.len(),
                inputs.scene_cameras.len()
            )));
        }
    }

    let updated: Vec<bool> = (0..scene.teeth.len())
        .map(|i| !config.freeze_present || missing_idx.contains(&i))
        .collect();
    let pos_scale = if config.position_lr_by_extent { scene_radius(&scene) } else { 1.0 };
    let order = arch_sequence(&scene);
    let mut state = OptimState::new(&scene);
    let mut trace = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        state.epoch = epoch;
        let lr = config.lr.per_param(epoch, pos_scale);

        // scene pass
        let mut scene_res = 0.0;
        let mut psnrs = Vec::new();
        for (v, cam) in inputs.scene_cameras.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, 0, v as u64]));
            let t = draw_t(&mut rng, inputs.schedule, config);
            let eps = draw_noise(cam.width, cam.height, &mut rng);
            let layouts: Vec<ToothLayout> = scene.teeth.iter().map(|t| t.layout).collect();
            let silhouette = render_layout_silhouette(&layouts, cam);
            let out = sds_grad_scene(
                &scene,
                cam,
                inputs.scene_provider,
                &silhouette,
                &SdsStep {
                    t,
                    eps: &eps,
                    schedule: inputs.schedule,
                    text: inputs.scene_text,
                    key: ViewKey::scene(v),
                    guidance: config.guidance_scene,
                },
            )?;
            check_finite(&out.grads, out.residual, epoch, || format!("scene distillation (view {v})"))?;
            scene_res += out.residual;
            if let Some(m) = inputs.monitor {
                psnrs.push(psnr(&out.image, &m[v], 1.0).map_err(|e| DistillError::Config(e.to_string()))?);
            }
            if config.lambda2 > 0.0 {
                for (i, g) in out.grads.iter().enumerate() {
                    if !updated[i] {
                        continue;
                    }
                    let g: Vec<GaussianGrad> = g.iter().map(|row| row.map(|x| config.lambda2 * x)).collect();
                    state.step(&mut scene, i, &g, &lr, config);
                }
            }
        }
        if !inputs.scene_cameras.is_empty() {
            scene_res /= inputs.scene_cameras.len() as f64;
        }

        // instance pass
        let snapshot = scene.clone();
        let mut inst_res = Vec::with_capacity(missing_idx.len());
        for (&id, &i) in inputs.missing.iter().zip(&missing_idx) {
            let cams = inputs.instance_cameras.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            let mut res = 0.0;
            for (v, cam) in cams.iter().enumerate() {
                let mut sds = None;
                if config.lambda1 > 0.0 {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, 1, u64::from(id.0), v as u64]));
                    let t = draw_t(&mut rng, inputs.schedule, config);
                    let eps = draw_noise(cam.width, cam.height, &mut rng);
                    let out = sds_grad_instance(
                        &scene.teeth[i],
                        cam,
                        inputs.instance_provider,
                        &SdsStep {
                            t,
                            eps: &eps,
                            schedule: inputs.schedule,
                            text: &instance_text[&id],
                            key: ViewKey::instance(id, v),
                            guidance: config.guidance_instance,
                        },
                    )?;
                    check_finite(&out.grads, out.residual, epoch, || {
                        format!("instance distillation (tooth {id}, view {v})")
                    })?;
                    res += out.residual;
                    sds = out.grads.into_iter().next();
                }
                let col = config
                    .collision
                    .then(|| neighbor_collision_grad(&scene, &snapshot, &order, i));
                let grads = instance_gradient(
                    scene.teeth[i].gaussians.len(),
                    sds.as_deref(),
                    col.as_deref(),
                    config.lambda1,
                );
                state.step(&mut scene, i, &grads, &lr, config);
            }
            inst_res.push(if cams.is_empty() { 0.0 } else { res / cams.len() as f64 });
        }

        // layout refresh
        for (t, &u) in scene.teeth.iter_mut().zip(&updated) {
            if u {
                t.layout = layout_from_gaussians(t);
            }
        }

        let report = penetration_distance(&scene);
        let collision: Vec<f64> = report.per_tooth.iter().map(|(_, l)| *l).collect();
        let total = total_loss(
            &inst_res,
            scene_res,
            if config.collision { &collision } else { &[] },
            config.lambda1,
            config.lambda2,
        );
        if !total.is_finite() {
            return Err(DistillError::NonFinite {
                epoch,
                term: "total loss".into(),
            });
        }
        let record = TraceRecord {
            epoch,
            total_loss: total,
            sds_scene: scene_res,
            sds_instance_sum: inst_res.iter().sum(),
            collision_sum: collision.iter().sum(),
            pd_mm: report.pd_mm,
            psnr_db: (!psnrs.is_empty()).then(|| psnrs.iter().sum::<f64>() / psnrs.len() as f64),
        };
        on_epoch(&record);
        trace.push(record);

        state.history.push(total);
        if state.history.len() > config.stop_window {
            state.history.remove(0);
        }
        if state.history.len() == config.stop_window {
            let (lo, hi) = state
                .history
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let mean = state.history.iter().sum::<f64>() / state.history.len() as f64;
            if hi - lo <= config.stop_rel_tol * mean.abs() {
                stopped_early = true;
                break;
            }
        }
    }

    let final_psnr_db = match inputs.monitor {
        Some(m) => {
            let mut acc = 0.0;
            for (cam, target) in inputs.scene_cameras.iter().zip(m) {
                let frame = crate::gsplat::render_scene(&scene, cam, Vector3::repeat(1.0))?;
                acc += psnr(&frame.image, target, 1.0).map_err(|e| DistillError::Config(e.to_string()))?;
            }
            Some(acc / m.len().max(1) as f64)
        }
        None => None,
    };
    Ok(OptimizeResult {
        scene,
        trace,
        stopped_early,
        final_psnr_db,
    })
}
