//! Command-line pipeline: dataset synthesis, layout training and sampling,
//! Gaussian optimization, rendering, evaluation and export.

mod commands;
pub mod config;
mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::PipelineConfig;
pub use pipeline::{jaw_cameras, optimization_scene, truth_gaussians};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dentoforge", version, about = "Generate missing teeth: layout diffusion plus Gaussian optimization")]
pub struct Cli {
    /// TOML config; its values override built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "DENTOFORGE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of complete jaws with truth point clouds.
    Synth(SynthArgs),
    /// Train the layout denoiser on a synthetic dataset.
    TrainLayout(TrainArgs),
    /// Fill in the layouts of the missing teeth of a jaw.
    SampleLayout(SampleArgs),
    /// Optimize per-tooth Gaussians for an augmented jaw graph.
    Optimize(OptimizeArgs),
    /// Sample layouts and optimize Gaussians in one go.
    Generate(GenerateArgs),
    /// Render a Gaussian scene from an orbit of cameras.
    Render(RenderArgs),
    /// Score generated scenes against a synthetic dataset.
    Eval(EvalArgs),
    /// Export Gaussian centers as a point cloud, or the truth Gaussians of a jaw.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Jaw side of every sample; by default even samples are upper jaws and
    /// odd samples lower jaws.
    #[arg(long)]
    pub side: Option<dentoforge::jawgraph::JawSide>,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Save and exit after this many completed epochs; a later `--resume`
    /// continues the same schedule.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Jaw graph with missing teeth.
    #[arg(long)]
    pub jaw: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to a description of the missing teeth.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeOpts {
    /// Complete jaw whose renders serve as reference targets. Without it a
    /// small learned score is trained on synthetic jaws.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Augmented jaw graph; teeth flagged missing are optimized.
    #[arg(long)]
    pub layout: PathBuf,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: OptimizeOpts,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub jaw: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after layout sampling.
    #[arg(long)]
    pub skip_optimize: bool,
    #[command(flatten)]
    pub opts: OptimizeOpts,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One subdirectory per sample, each holding `scene.ply` and optionally
    /// `graph.json` (whose missing teeth are scored).
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset written by `synth`.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Also write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Gaussian scene whose centers are written as a point cloud.
    #[arg(long, conflicts_with = "jaw", required_unless_present = "jaw")]
    pub scene: Option<PathBuf>,
    /// Complete jaw whose truth Gaussians are written.
    #[arg(long)]
    pub jaw: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit code for an error, from the first recognized cause in its chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use dentoforge::distill::DistillError;
    use dentoforge::gsplat::RenderError;
    use dentoforge::layoutdiffusion::{CheckpointError, DiffusionError};

    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<DiffusionError>() {
            match e {
                DiffusionError::NonFiniteLoss { .. } => return EXIT_NUMERIC,
                DiffusionError::Checkpoint(CheckpointError::Io(_)) => return EXIT_IO,
                _ => return EXIT_VALIDATION,
            }
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return if matches!(e, CheckpointError::Io(_)) { EXIT_IO } else { EXIT_VALIDATION };
        }
        if let Some(e) = cause.downcast_ref::<DistillError>() {
            match e {
                DistillError::NonFinite { .. } => return EXIT_NUMERIC,
                DistillError::Render(RenderError::Io(_)) => return EXIT_IO,
                DistillError::Render(RenderError::NonFinite { .. }) => return EXIT_NUMERIC,
                _ => return EXIT_VALIDATION,
            }
        }
        if let Some(e) = cause.downcast_ref::<RenderError>() {
            return match e {
                RenderError::Io(_) => EXIT_IO,
                RenderError::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_VALIDATION,
            };
        }
    }
    EXIT_VALIDATION
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
