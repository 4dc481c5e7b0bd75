use std::collections::BTreeMap;

use anyhow::{Context, Result};
use dentoforge::distill::{
    instance_cameras, optimize, tooth_prompt, LearnedConfig, LearnedScore, OptimizeInputs, OptimizeResult,
    ReferenceScore, ScoreProvider, ScoreSample, TraceRecord,
};
use dentoforge::gsplat::{
    init_from_layout, orbit_cameras, render_layout_silhouette, render_scene, Camera, OrbitSpec, Rasterizer,
    SceneGaussians,
};
use dentoforge::jawgraph::{JawGraph, ToothId, ToothLayout};
use dentoforge::layoutdiffusion::{embed_text, make_schedule, ScheduleKind};
use dentoforge::mix_seed;
use dentoforge::synthjaw::{sample_jaw, truth_scene, truth_tooth, ArchParams};
use nalgebra::{Point3, Vector3};

use crate::config::PipelineConfig;

/// Orbit around a set of tooth boxes, sized to enclose all of them.
pub fn jaw_cameras(layouts: &[ToothLayout], spec: &OrbitSpec) -> Vec<Camera> {
    let n = layouts.len().max(1) as f64;
    let center = Point3::from(layouts.iter().map(|l| l.center().coords).sum::<Vector3<f64>>() / n);
    let extent = layouts
        .iter()
        .map(|l| (l.center() - center).norm() + l.half_extents().norm())
        .fold(0.0, f64::max);
    orbit_cameras(spec, center, extent)
}

/// Ground-truth Gaussians of every tooth with a layout.
pub fn truth_gaussians(graph: &JawGraph, cfg: &PipelineConfig) -> SceneGaussians {
    truth_scene(graph, cfg.synth.points_per_tooth, cfg.synth.truth_seed)
}

/// Starting scene for an augmented graph: teeth flagged missing start as
/// Gaussians spread through their layout boxes, observed teeth use the truth
/// Gaussians of their boxes as a stand-in for scanned geometry. Returns the
/// scene and the ids of the teeth to generate.
pub fn optimization_scene(graph: &JawGraph, cfg: &PipelineConfig, seed: u64) -> Result<(SceneGaussians, Vec<ToothId>)> {
    let mut teeth = Vec::new();
    let mut missing = Vec::new();
    for node in &graph.nodes {
        let layout = node
            .layout
            .with_context(|| format!("tooth {} has no layout; sample the layout first", node.tooth_id))?;
        if node.missing {
            missing.push(node.tooth_id);
            teeth.push(init_from_layout(
                node.tooth_id,
                &layout,
                cfg.distill.gaussians_per_tooth,
                mix_seed(&[seed, u64::from(node.tooth_id.0), 20]),
            ));
        } else {
            teeth.push(truth_tooth(&layout, node.tooth_id, cfg.synth.points_per_tooth, cfg.synth.truth_seed));
        }
    }
    Ok((SceneGaussians::new(teeth), missing))
}

/// Small learned score trained on renders of synthetic jaws of the same
/// side: whole-jaw views with their layout silhouettes, and single-tooth
/// orbits of the teeth being generated.
fn learned_score(
    graph: &JawGraph,
    missing: &[ToothId],
    scene_prompt: &str,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<LearnedScore> {
    let bg = Vector3::repeat(1.0);
    let scene_text = embed_text(scene_prompt)?;
    let mut samples = Vec::new();
    for k in 0..cfg.distill.learned_jaws {
        let jaw = sample_jaw(&ArchParams::default_for(graph.jaw_side), mix_seed(&[seed, k as u64, 21]))?;
        let truth = truth_gaussians(&jaw, cfg);
        let layouts: Vec<ToothLayout> = truth.teeth.iter().map(|t| t.layout).collect();
        for cam in jaw_cameras(&layouts, &cfg.cameras.scene) {
            samples.push(ScoreSample {
                image: render_scene(&truth, &cam, bg)?.image,
                layout: Some(render_layout_silhouette(&layouts, &cam)),
                text: scene_text.clone(),
            });
        }
        for &id in missing {
            let Some(i) = truth.find(id) else { continue };
            let text = embed_text(&tooth_prompt(id))?;
            for cam in instance_cameras(&truth.teeth[i].layout, &cfg.cameras.instance) {
                samples.push(ScoreSample {
                    image: Rasterizer::new(cam, bg)?.render(&[&truth.teeth[i]])?.image,
                    layout: None,
                    text: text.clone(),
                });
            }
        }
    }
    let mut model = LearnedScore::new(LearnedConfig {
        channels: cfg.distill.learned_channels,
        epochs: cfg.distill.learned_epochs,
        lr: 2e-3,
        seed: mix_seed(&[seed, 22]),
    })?;
    let schedule = make_schedule(cfg.distill.timesteps, ScheduleKind::Cosine)?;
    model.train(&samples, &schedule)?;
    Ok(model)
}

pub struct Optimized {
    pub result: OptimizeResult,
    pub scene_cameras: Vec<Camera>,
    /// The input graph with the boxes of generated teeth refit to their
    /// optimized Gaussians.
    pub graph: JawGraph,
}

/// Runs the compositional optimization for an augmented graph.
pub fn run_optimization(
    graph: &JawGraph,
    truth: Option<&JawGraph>,
    prompt: &str,
    cfg: &PipelineConfig,
    seed: u64,
    on_epoch: impl FnMut(&TraceRecord),
) -> Result<Optimized> {
    let (scene, missing) = optimization_scene(graph, cfg, seed)?;
    let layouts: Vec<ToothLayout> = scene.teeth.iter().map(|t| t.layout).collect();
    let scene_cameras = jaw_cameras(&layouts, &cfg.cameras.scene);
    let instance: BTreeMap<ToothId, Vec<Camera>> = missing
        .iter()
        .map(|&id| {
            let i = scene.find(id).expect("missing tooth is in the scene");
            (id, instance_cameras(&scene.teeth[i].layout, &cfg.cameras.instance))
        })
        .collect();
    let schedule = make_schedule(cfg.distill.timesteps, ScheduleKind::Cosine)?;
    let text = embed_text(prompt)?;

    let reference;
    let learned;
    let monitor;
    let provider: &dyn ScoreProvider = match truth {
        Some(t) => {
            let truth_scene = truth_gaussians(t, cfg);
            reference = ReferenceScore::from_truth(&truth_scene, &scene_cameras, &instance)?;
            monitor = reference.scene_targets(scene_cameras.len());
            &reference
        }
        None => {
            learned = learned_score(graph, &missing, prompt, cfg, seed)?;
            monitor = None;
            &learned
        }
    };
    let inputs = OptimizeInputs {
        scene_cameras: &scene_cameras,
        instance_cameras: &instance,
        missing: &missing,
        scene_text: &text,
        scene_provider: provider,
        instance_provider: provider,
        schedule: &schedule,
        monitor: monitor.as_deref(),
    };
    let result = optimize(scene, &inputs, &cfg.distill_config(), seed, on_epoch)?;
    let mut out = graph.clone();
    for node in out.nodes.iter_mut().filter(|n| n.missing) {
        if let Some(i) = result.scene.find(node.tooth_id) {
            node.layout = Some(result.scene.teeth[i].layout.wrapped());
        }
    }
    Ok(Optimized {
        result,
        scene_cameras,
        graph: out,
    })
}
