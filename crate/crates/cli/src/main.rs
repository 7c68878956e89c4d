//! `phdiff`: data generation, training, harmonization and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "phdiff", version, about = "Painterly image harmonization with a guided latent diffusion model")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// key = value file; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// tiny (32 px), desk (128 px) or full (512 px).
    #[arg(long, global = true)]
    pub profile: Option<phdiff::Profile>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fraction of the schedule to re-noise, in [0, 1].
    #[arg(long, global = true, value_parser = parse_strength)]
    pub strength: Option<f64>,
    /// ddim or ddpm.
    #[arg(long, global = true)]
    pub sampler: Option<phdiff::diffusion::SamplerMode>,
    /// Drop the contrastive style loss.
    #[arg(long, global = true)]
    pub no_cl: bool,
    /// Drop the AdaIN style loss.
    #[arg(long, global = true)]
    pub no_adain: bool,
    /// Disable the adaptive-side fusion transformer.
    #[arg(long, global = true)]
    pub no_ta: bool,
    /// Disable the denoiser-side fusion transformer.
    #[arg(long, global = true)]
    pub no_tu: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic composites and a manifest.
    Datagen(DatagenArgs),
    /// Train the frozen backbone's denoiser on the noise objective.
    Pretrain(PretrainArgs),
    /// Train adapter, fusion and projection head on a pretrained backbone.
    Train(TrainArgs),
    /// Harmonize one composite.
    Harmonize(HarmonizeArgs),
    /// Harmonize at several strengths; writes a contact sheet and metrics.
    Sweep(SweepArgs),
    /// Fit Bradley-Terry scores to pairwise preference records.
    Eval(EvalArgs),
    /// Finite-difference check of the training gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "backbone.phdf")]
    pub out: PathBuf,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub min_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Loss log; defaults to the checkpoint path with a `.log` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Pretrained backbone checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "model.phdf")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub composite: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
}

#[derive(Args, Debug)]
pub struct HarmonizeArgs {
    #[command(flatten)]
    pub input: SampleArgs,
    /// Painting behind the composite; enables metric reporting.
    #[arg(long)]
    pub background: Option<PathBuf>,
    #[arg(long, default_value = "harmonized.png")]
    pub out: PathBuf,
    /// Directory for per-level, per-side, per-step attention maps.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: SampleArgs,
    #[arg(long)]
    pub background: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_strength, default_value = "0.1,0.3,0.5,0.7,0.9")]
    pub strengths: Vec<f64>,
    #[arg(long, default_value = "sweep.png")]
    pub out: PathBuf,
    /// Metrics table; defaults to the image path with a `.csv` extension.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// CSV with header `item_a,item_b,winner`.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value = "scores.csv")]
    pub out: PathBuf,
    /// Ridge on the scores; 0 uses a tiny stabilizer.
    #[arg(long, default_value_t = 0.0)]
    pub l2: f64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub probes: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub h: f64,
    /// Exit nonzero when the worst relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn parse_strength(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{v} is outside [0, 1]"));
    }
    Ok(v)
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PHDIFF_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("PHDIFF_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// One JSON object per failure, on stderr.
fn report(err: &anyhow::Error) {
    let kind = err.chain().find_map(|e| e.downcast_ref::<phdiff::Error>()).map_or("error", |e| e.kind());
    let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| commands::run(cli)) {
        Ok(code) => code,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
