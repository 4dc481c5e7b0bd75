use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dentoforge::gsplat::{
    orbit_cameras, read_ply, read_point_cloud, render_scene, write_ply, write_point_cloud, Camera, SceneGaussians,
};
use dentoforge::jawgraph::{deserialize, serialize, JawGraph, JawSide, ToothId, ToothLayout};
use dentoforge::layoutdiffusion::{
    embed_text, make_schedule, missing_prompt, sample_layout, Checkpoint, Trainer,
};
use dentoforge::metrics::{evaluate, EvalSummary};
use dentoforge::mix_seed;
use dentoforge::synthjaw::{sample_jaw, sample_jaw_points, ArchParams};
use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::pipeline::{jaw_cameras, run_optimization, truth_gaussians};
use crate::{
    Cli, Command, EvalArgs, ExportArgs, GenerateArgs, OptimizeArgs, OptimizeOpts, RenderArgs, SampleArgs,
    SynthArgs, TrainArgs,
};

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    jaw_side: JawSide,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    points_per_tooth: usize,
    truth_seed: u64,
    samples: Vec<ManifestEntry>,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.threads {
        // a pool may already exist when running in-process; keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(a) => synth(&a, &cfg),
        Command::TrainLayout(a) => train_layout(&a, &cfg),
        Command::SampleLayout(a) => sample(&a, &cfg),
        Command::Optimize(a) => optimize_cmd(&a, &mut cfg),
        Command::Generate(a) => generate(&a, &mut cfg),
        Command::Render(a) => render(&a, &cfg),
        Command::Eval(a) => eval(&a, &cfg),
        Command::Export(a) => export(&a, &cfg),
    }
}

fn read_graph(path: &Path) -> Result<JawGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    deserialize(&text).with_context(|| format!("in {}", path.display()))
}

fn write_graph(path: &Path, graph: &JawGraph) -> Result<()> {
    fs::write(path, serialize(graph)?).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn synth(a: &SynthArgs, cfg: &PipelineConfig) -> Result<()> {
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .with_context(|| format!("reading {}", a.out.display()))?
            .next()
            .is_some();
        if non_empty && !a.force {
            bail!("output directory {} is not empty (use --force to overwrite)", a.out.display());
        }
    }
    create_dir(&a.out)?;
    let mut samples = Vec::with_capacity(a.n);
    for j in 0..a.n {
        let side = a.side.unwrap_or(if j % 2 == 0 { JawSide::Upper } else { JawSide::Lower });
        let seed = mix_seed(&[cfg.seed, j as u64]);
        let jaw = sample_jaw(&ArchParams::default_for(side), seed)?;
        let name = format!("jaw_{j:04}");
        write_graph(&a.out.join(format!("{name}.json")), &jaw)?;
        let points: Vec<(ToothId, Point3<f64>)> =
            sample_jaw_points(&jaw, cfg.synth.points_per_tooth, cfg.synth.truth_seed)
                .into_iter()
                .flat_map(|(id, pts)| pts.into_iter().map(move |p| (id, p)))
                .collect();
        write_point_cloud(&a.out.join(format!("{name}_points.ply")), &points)?;
        samples.push(ManifestEntry {
            name,
            jaw_side: side,
            seed,
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        points_per_tooth: cfg.synth.points_per_tooth,
        truth_seed: cfg.synth.truth_seed,
        samples,
    };
    let path = a.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} jaws to {}", a.n, a.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<JawGraph>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    manifest
        .samples
        .iter()
        .map(|s| read_graph(&dir.join(format!("{}.json", s.name))))
        .collect()
}

fn train_layout(a: &TrainArgs, cfg: &PipelineConfig) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            let t = ck.into_trainer()?;
            println!("resuming at epoch {}", t.epoch);
            t
        }
        None => {
            let mut tc = cfg.train_config();
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            let schedule = make_schedule(cfg.layout.timesteps, cfg.layout.schedule)?;
            Trainer::new(&dataset, cfg.denoiser_config(), schedule, tc)?
        }
    };
    if a.resume.is_some() {
        if let Some(e) = a.epochs {
            // changes the learning-rate schedule of the remaining epochs
            trainer.config.epochs = e;
        }
    }
    let stop = a.stop_after.unwrap_or(usize::MAX).min(trainer.config.epochs);
    while trainer.epoch < stop {
        let loss = trainer.run_epoch(&dataset)?;
        println!("epoch {} loss {loss:.9}", trainer.epoch);
    }
    Checkpoint::from_trainer(&trainer)
        .save(&a.out)
        .with_context(|| format!("saving checkpoint {}", a.out.display()))?;
    Ok(())
}

fn sample_graph(
    jaw: &Path,
    checkpoint: &Path,
    prompt: Option<&str>,
    steps: Option<usize>,
    cfg: &PipelineConfig,
) -> Result<(JawGraph, String)> {
    let source = read_graph(jaw)?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let prompt = prompt.map_or_else(|| missing_prompt(&source), str::to_string);
    let text = embed_text(&prompt)?;
    let schedule = ck.model.schedule.clone();
    let out = sample_layout(
        &ck.model,
        &source,
        &text,
        &schedule,
        steps.unwrap_or(cfg.layout.sample_steps),
        cfg.seed,
    )?;
    Ok((out, prompt))
}

fn sample(a: &SampleArgs, cfg: &PipelineConfig) -> Result<()> {
    let (out, _) = sample_graph(&a.jaw, &a.checkpoint, a.prompt.as_deref(), a.steps, cfg)?;
    write_graph(&a.out, &out)
}

fn save_renders(dir: &Path, scene: &SceneGaussians, cams: &[Camera]) -> Result<()> {
    create_dir(dir)?;
    for (v, cam) in cams.iter().enumerate() {
        render_scene(scene, cam, Vector3::repeat(1.0))?
            .image
            .save_png(&dir.join(format!("view_{v:02}.png")))?;
    }
    Ok(())
}

/// Optimizes `graph` and writes `scene.ply`, `trace.jsonl`, `graph.json`
/// and `renders/` into `out`.
fn optimize_into(graph: &JawGraph, prompt: &str, opts: &OptimizeOpts, out: &Path, cfg: &mut PipelineConfig) -> Result<()> {
    if let Some(e) = opts.epochs {
        cfg.distill.max_epochs = e;
    }
    let truth = opts.truth.as_deref().map(read_graph).transpose()?;
    create_dir(out)?;
    let trace_path = out.join("trace.jsonl");
    let mut trace =
        io::BufWriter::new(fs::File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?);
    // the first write error is kept and reported once optimization ends
    let mut trace_err: Option<io::Error> = None;
    let seed = cfg.seed;
    let done = run_optimization(graph, truth.as_ref(), prompt, cfg, seed, |r| {
        if trace_err.is_none() {
            let line = serde_json::to_string(r).expect("trace record serializes");
            trace_err = writeln!(trace, "{line}").err();
        }
        if r.epoch % 20 == 0 || r.epoch == 1 {
            println!("epoch {} loss {:.6} pd {:.4} mm", r.epoch, r.total_loss, r.pd_mm);
        }
    })?;
    trace_err
        .map_or_else(|| trace.flush(), Err)
        .with_context(|| format!("writing {}", trace_path.display()))?;
    write_ply(&out.join("scene.ply"), &done.result.scene)?;
    write_graph(&out.join("graph.json"), &done.graph)?;
    save_renders(&out.join("renders"), &done.result.scene, &done.scene_cameras)?;
    if let Some(last) = done.result.trace.last() {
        println!("finished after {} epochs: pd {:.4} mm", last.epoch, last.pd_mm);
    }
    Ok(())
}

fn optimize_cmd(a: &OptimizeArgs, cfg: &mut PipelineConfig) -> Result<()> {
    let graph = read_graph(&a.layout)?;
    let prompt = a.prompt.clone().unwrap_or_else(|| missing_prompt(&graph));
    optimize_into(&graph, &prompt, &a.opts, &a.out, cfg)
}

fn generate(a: &GenerateArgs, cfg: &mut PipelineConfig) -> Result<()> {
    let (graph, prompt) = sample_graph(&a.jaw, &a.checkpoint, a.prompt.as_deref(), a.steps, cfg)?;
    create_dir(&a.out)?;
    write_graph(&a.out.join("layout.json"), &graph)?;
    if a.skip_optimize {
        return write_graph(&a.out.join("graph.json"), &graph);
    }
    optimize_into(&graph, &prompt, &a.opts, &a.out, cfg)
}

fn scene_cameras(scene: &SceneGaussians, cfg: &PipelineConfig, size: Option<usize>) -> Vec<Camera> {
    let pts: Vec<Vector3<f64>> = scene.teeth.iter().flat_map(|t| t.gaussians.iter().map(|g| g.center)).collect();
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len().max(1) as f64;
    let extent = pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    let mut spec = cfg.cameras.scene.clone();
    if let Some(s) = size {
        spec.image_size = s;
    }
    orbit_cameras(&spec, Point3::from(c), extent)
}

fn render(a: &RenderArgs, cfg: &PipelineConfig) -> Result<()> {
    let scene = read_ply(&a.scene).with_context(|| format!("reading {}", a.scene.display()))?;
    anyhow::ensure!(scene.num_gaussians() > 0, "scene {} has no Gaussians", a.scene.display());
    save_renders(&a.out, &scene, &scene_cameras(&scene, cfg, a.size))
}

#[derive(Debug, Serialize)]
struct EvalRow {
    sample: String,
    #[serde(flatten)]
    summary: EvalSummary,
}

fn eval_sample(pred_dir: &Path, truth_dir: &Path, name: &str, tau: f64, cfg: &PipelineConfig) -> Result<EvalSummary> {
    let need = |p: PathBuf, what: &str| -> Result<PathBuf> {
        if p.is_file() {
            Ok(p)
        } else {
            bail!("sample {name}: missing {what} file {}", p.display())
        }
    };
    let truth_json = need(truth_dir.join(format!("{name}.json")), "truth")?;
    let truth_pts = need(truth_dir.join(format!("{name}_points.ply")), "truth")?;
    let scene_path = need(pred_dir.join(name).join("scene.ply"), "prediction")?;
    let truth = read_graph(&truth_json)?;
    let points = read_point_cloud(&truth_pts).with_context(|| format!("sample {name}"))?;
    let scene = read_ply(&scene_path).with_context(|| format!("sample {name}"))?;
    let graph_path = pred_dir.join(name).join("graph.json");
    let scored: Vec<ToothId> = if graph_path.is_file() {
        read_graph(&graph_path)?.nodes.iter().filter(|n| n.missing).map(|n| n.tooth_id).collect()
    } else {
        scene.teeth.iter().map(|t| t.tooth_id).collect()
    };
    let mut per_tooth: Vec<(ToothId, Vec<Point3<f64>>)> = scored.iter().map(|&id| (id, Vec::new())).collect();
    for (id, p) in points {
        if let Some((_, v)) = per_tooth.iter_mut().find(|(t, _)| *t == id) {
            v.push(p);
        }
    }
    if let Some((id, _)) = per_tooth.iter().find(|(_, v)| v.is_empty()) {
        bail!("sample {name}: no truth points for tooth {id}");
    }
    let layouts: Vec<ToothLayout> = truth.nodes.iter().filter_map(|n| n.layout).collect();
    let cams = jaw_cameras(&layouts, &cfg.cameras.scene);
    let truth_scene = truth_gaussians(&truth, cfg);
    let targets = cams
        .iter()
        .map(|c| Ok(render_scene(&truth_scene, c, Vector3::repeat(1.0))?.image))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&scene, &per_tooth, &cams, &targets, tau).with_context(|| format!("sample {name}"))
}

fn eval(a: &EvalArgs, cfg: &PipelineConfig) -> Result<()> {
    let tau = a.tau.unwrap_or(cfg.eval.tau_mm);
    anyhow::ensure!(tau > 0.0, "--tau must be positive");
    let mut names: Vec<String> = fs::read_dir(&a.pred)
        .with_context(|| format!("reading {}", a.pred.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    anyhow::ensure!(!names.is_empty(), "no sample directories in {}", a.pred.display());
    let mut rows = Vec::with_capacity(names.len());
    println!("{:<12} {}", "sample", EvalSummary::header());
    for name in names {
        let summary = eval_sample(&a.pred, &a.truth, &name, tau, cfg)?;
        println!("{name:<12} {}", summary.row());
        rows.push(EvalRow { sample: name, summary });
    }
    let n = rows.len() as f64;
    let psnrs: Vec<f64> = rows.iter().filter_map(|r| r.summary.psnr_db).collect();
    let mean = EvalSummary {
        psnr_db: (!psnrs.is_empty()).then(|| psnrs.iter().sum::<f64>() / psnrs.len() as f64),
        chamfer_mm: rows.iter().map(|r| r.summary.chamfer_mm).sum::<f64>() / n,
        fscore: rows.iter().map(|r| r.summary.fscore).sum::<f64>() / n,
        tau_mm: tau,
        pd_mm: rows.iter().map(|r| r.summary.pd_mm).sum::<f64>() / n,
    };
    println!("{:<12} {}", "mean", mean.row());
    if let Some(p) = &a.json {
        rows.push(EvalRow {
            sample: "mean".into(),
            summary: mean,
        });
        fs::write(p, serde_json::to_string_pretty(&rows)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn export(a: &ExportArgs, cfg: &PipelineConfig) -> Result<()> {
    match (&a.scene, &a.jaw) {
        (Some(scene), None) => {
            let scene = read_ply(scene).with_context(|| format!("reading {}", scene.display()))?;
            let points: Vec<(ToothId, Point3<f64>)> = scene
                .teeth
                .iter()
                .flat_map(|t| t.centers().into_iter().map(move |p| (t.tooth_id, p)))
                .collect();
            write_point_cloud(&a.out, &points)?;
        }
        (None, Some(jaw)) => {
            let graph = read_graph(jaw)?;
            anyhow::ensure!(
                graph.nodes.iter().all(|n| n.layout.is_some()),
                "jaw {} has teeth without layouts",
                jaw.display()
            );
            write_ply(&a.out, &truth_gaussians(&graph, cfg))?;
        }
        _ => bail!("give exactly one of --scene or --jaw"),
    }
    Ok(())
}
