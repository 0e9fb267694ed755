//! `ckm`: synthesize data, train a prior, serve and fetch it, and construct
//! or evaluate CKMs from degraded measurements.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use ckm_core::eval::TaskKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::LevelFilter;
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "ckm",
    version,
    about = "Channel knowledge map construction with a diffusion prior"
)]
pub struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Root for relative output paths and the config echo.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,

    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a score network on a dataset.
    Train(TrainArgs),
    /// Serve a model registry over CKMP.
    Serve(ServeArgs),
    /// Add a weights file to a registry.
    Publish(PublishArgs),
    /// Fetch a model into the local cache.
    Fetch(FetchArgs),
    /// Degrade a grid into an observation.
    Observe(ObserveArgs),
    /// Reconstruct a grid from an observation.
    Construct(ConstructArgs),
    /// Score a task over a test set.
    Eval(EvalArgs),
    /// Evaluate a task at several constraint strengths.
    Sweep(SweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Serve(_) => "serve",
            Command::Publish(_) => "publish",
            Command::Fetch(_) => "fetch",
            Command::Observe(_) => "observe",
            Command::Construct(_) => "construct",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Grid side in cells; must be a multiple of 4.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Weight each timestep by its noise variance.
    NoiseVariance,
    /// Plain score MSE.
    Unweighted,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory or a single CKMG file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Diffusion steps N. Defaults to 200, or to the --init model's.
    #[arg(long)]
    pub n_timesteps: Option<usize>,
    /// Base channel width. Defaults to 32, or to the --init model's.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.999)]
    pub ema: f64,
    #[arg(long, value_enum, default_value_t = Weighting::NoiseVariance)]
    pub weighting: Weighting,
    /// Loss CSV granularity, in steps.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Continue from these weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output CKMW file; the loss CSV goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub registry: PathBuf,
    /// Port 0 picks a free port; the bound address is printed.
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub bind: String,
}

#[derive(Debug, Args, Serialize)]
pub struct PublishArgs {
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub version: String,
    /// Unix seconds recorded in the manifest; defaults to now.
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct FetchArgs {
    /// host:port of a `ckm serve` instance.
    #[arg(long)]
    pub server: String,
    #[arg(long, default_value = "latest")]
    pub version: String,
    /// Cache directory; defaults to $CKM_CACHE_DIR or the user cache.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ObserveArgs {
    /// Ground-truth CKMG file.
    #[arg(long)]
    pub grid: PathBuf,
    /// Operator JSON, inline or a file path.
    #[arg(long)]
    pub op_json: String,
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    /// Output CKMO file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ConstructArgs {
    /// Local CKMW file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// host:port to fetch the prior from.
    #[arg(long)]
    pub server: Option<String>,
    #[arg(long, default_value = "latest")]
    pub version: String,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Observation (CKMO) file.
    #[arg(long)]
    pub obs: PathBuf,
    /// Reinterpret the observation under this operator.
    #[arg(long)]
    pub op_json: Option<String>,
    /// Constraint strength; defaults to 10 for truncation/quantization, 13 otherwise.
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub corrector_steps: usize,
    #[arg(long, default_value_t = 0.16)]
    pub snr: f64,
    /// Treat the score as constant in the constraint gradient.
    #[arg(long)]
    pub detach_score: bool,
    /// Record a runtime of 0 so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
    /// Output CKMG file; the JSON sidecar goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TaskArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset directory of ground-truth grids.
    #[arg(long)]
    pub testset: PathBuf,
    /// ipbox, iprandom, sr, jtqr or identity.
    #[arg(long, value_parser = parse_task)]
    pub task: TaskKind,
    #[arg(long, default_value_t = 1)]
    pub corrector_steps: usize,
    #[arg(long, default_value_t = 0.16)]
    pub snr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    #[arg(long)]
    pub detach_score: bool,
    /// Leave building cells out of the RMSE.
    #[arg(long)]
    pub exclude_buildings: bool,
    #[arg(long)]
    pub no_timing: bool,
    /// Grids reconstructed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    /// Defaults by task: 10 for jtqr, 13 otherwise.
    #[arg(long)]
    pub zeta: Option<f64>,
    /// Write observation/truth/reconstruction PGMs under <out-dir>/pgm.
    #[arg(long)]
    pub dump_pgm: bool,
    /// Metrics report JSON.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    /// Comma-separated constraint strengths.
    #[arg(long, default_value = "0,5,10,13,20,100")]
    pub zetas: String,
    /// Summary CSV.
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
    /// Also write every per-zeta report to this JSON file.
    #[arg(long)]
    pub reports: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::from_str(s).map_err(|e| e.to_string())
}

fn init_logging(level: &str) -> Result<(), CliError> {
    let filter = LevelFilter::from_str(level)
        .map_err(|_| CliError::usage(format!("unknown log level {level:?}")))?;
    env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let text = e.to_string();
            eprintln!(
                "ckm: {}",
                text.lines()
                    .next()
                    .unwrap_or("usage error")
                    .trim_start_matches("error: ")
            );
            return ExitCode::from(error::EXIT_USAGE as u8);
        }
        Err(e) => e.exit(),
    };
    let result = init_logging(&cli.log_level).and_then(|()| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ckm {}: {msg}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
