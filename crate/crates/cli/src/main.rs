//! `matrix-lab`: reproducible runs over the toy video DiT toolkit.

mod commands;
mod config;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "matrix-lab",
    version,
    about = "Attention alignment experiments on a toy video DiT"
)]
struct Cli {
    /// TOML run configuration (supports ${VAR} and ${VAR:-fallback}).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default: $MATRIX_LAB_OUT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic interaction dataset.
    GenData(GenDataArgs),
    /// Per-layer AAS of a model over a dataset.
    Analyze(AnalyzeArgs),
    /// Influential and dominant layers from an AAS table.
    RankLayers(RankArgs),
    /// Fine-tune with the alignment losses.
    Train(TrainArgs),
    /// DDIM sampling with optional attention-perturbation guidance.
    Sample(SampleArgs),
    /// Score answer sheets, or a dataset through the track-based judge.
    ScoreEval(ScoreArgs),
    /// Run the curation simulator over fixtures or a dataset.
    CurateSim(CurateArgs),
    /// Summaries and SVG figures from earlier runs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// Store masks inline as base64 RLE instead of sidecar files.
    #[arg(long)]
    pub inline_masks: bool,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Trained checkpoint; a freshly initialized model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub timesteps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Also write noun grounding heatmaps for the first clip.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Debug)]
pub struct RankArgs {
    #[arg(long)]
    pub aas: PathBuf,
    /// Dataset supplying success labels; dominance is skipped without it.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub select_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub g_layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub p_layers: Option<Vec<usize>>,
    /// rankings.json from rank-layers; picks supervised layers from it.
    #[arg(long, conflicts_with_all = ["g_layers", "p_layers"])]
    pub rankings: Option<PathBuf>,
    #[arg(long)]
    pub lambda_sga: Option<f64>,
    #[arg(long)]
    pub lambda_spa: Option<f64>,
    /// Trailing clips kept out of training and used for evaluation.
    #[arg(long)]
    pub held_out: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Clip id providing the conditioning; the first clip by default.
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub cag_layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub cmg_layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub guide_steps: Option<Vec<usize>>,
    /// Grounding perturbation strategy (cmg, cmg-noun, cmg-verb, none).
    #[arg(long)]
    pub cmg_strategy: Option<String>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Directory of answer-sheet JSON files.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub answers: Option<PathBuf>,
    /// Dataset judged from its own mask tracks.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    /// Directory of `*.fixture.json` files.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub fixtures: Option<PathBuf>,
    /// Dataset to wrap in synthetic fixtures.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sampled_frames: Option<usize>,
    #[arg(long)]
    pub slots: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories to summarize.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = RunConfig::load(cli.config.as_deref()).and_then(|mut cfg| {
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(j) = cli.jobs {
            cfg.jobs = j;
        }
        if cli.out.is_some() {
            cfg.out = cli.out.clone();
        }
        commands::run(cfg, &cli.command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
