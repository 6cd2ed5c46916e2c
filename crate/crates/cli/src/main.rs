//! `predlab` command-line front end.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::manifest::RunManifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] predlab::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lib(predlab::Error::Config(_)) => 2,
            CliError::Lib(predlab::Error::Divergence { .. }) => 4,
            CliError::Lib(_) => 3,
            CliError::Verification(_) => 5,
        }
    }
}

/// Learned next-frame prediction: train, evaluate and benchmark recurrent
/// (CRNN, CLSTM) and feedforward (FCNN) predictors on grayscale video.
///
/// Exit status: 0 success, 2 usage, 3 data error, 4 numeric divergence,
/// 5 verification failure.
#[derive(Debug, Parser)]
#[command(name = "predlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a model and write checkpoints, a loss log and a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint on videos and write PSNR CSVs, charts and a summary.
    Eval(EvalArgs),
    /// Time full-frame inference.
    Bench(BenchArgs),
    /// Write a deterministic synthetic video.
    Gen(GenArgs),
    /// Print parameter counts of the default architectures.
    Params(ParamsArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Crnn,
    Clstm,
    Fcnn,
}

impl ModelArg {
    pub fn architecture(self) -> predlab::models::Architecture {
        use predlab::models::Architecture;
        match self {
            ModelArg::Crnn => Architecture::Crnn,
            ModelArg::Clstm => Architecture::Clstm,
            ModelArg::Fcnn => Architecture::Fcnn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Stateless,
    Stateful,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Translate,
    Oscillate,
    Noise,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Random seed for initialization, sampling and synthetic data. Falls
    /// back to PREDLAB_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the run manifest (JSON). Train and eval default to
    /// manifest.json in their output directory, gen to <out>.manifest.json.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
}

/// Defaults marked "published" follow the reference training recipes;
/// "local" defaults are choices of this tool. Precedence: built-in defaults,
/// then --config, then flags.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// key=value file with any of the flag names below (underscores or dashes).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Architecture [default: crnn, local].
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    /// Recurrent training procedure [default: stateful, the published
    /// low-memory procedure]. The FCNN trains feedforward and rejects this flag.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Training video (.y4m, .pgm, or a directory of .pgm frames);
    /// repeatable. Without it a synthetic translating clip is generated.
    #[arg(long, value_name = "PATH")]
    pub data: Vec<PathBuf>,
    /// Adam learning rate [default: 1e-5 CRNN/CLSTM, 1e-4 FCNN; published].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sequences per minibatch [default: 4 CRNN/CLSTM, 32 FCNN; published].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Frames per sampled sequence [default: 8 stateless (published
    /// truncation), 96 stateful (published), 9 FCNN (8 stacked inputs plus
    /// the target, published)].
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Crop size HxW [default: 184x184 CRNN/CLSTM, 48x48 FCNN; published].
    #[arg(long, value_name = "HxW")]
    pub patch: Option<String>,
    /// Update budget [default: 1000, local].
    #[arg(long)]
    pub steps: Option<u64>,
    /// Input-frame budget; training stops when either budget runs out
    /// [default: none].
    #[arg(long)]
    pub frames: Option<u64>,
    /// Updates per log row and checkpoint [default: 100, local].
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Background sampling threads; 0 samples inline [default: 0, local].
    #[arg(long)]
    pub workers: Option<usize>,
    /// FCNN motion threshold on the smallest consecutive-frame SSD
    /// [default: calibrated so about 30% of candidates pass, local].
    #[arg(long)]
    pub motion_threshold: Option<f64>,
    /// Acceptance probability for low-motion FCNN candidates [default: 0.05, published].
    #[arg(long)]
    pub low_motion_accept: Option<f64>,
    /// FCNN sequences drawn up front [default: 10000, local].
    #[arg(long)]
    pub dataset_size: Option<usize>,
    /// Directory caching the drawn FCNN sequences; reused when populated.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// FCNN updates without improvement before the learning rate is cut
    /// [default: 6000, published].
    #[arg(long)]
    pub plateau_patience: Option<u64>,
    /// FCNN learning-rate cut factor [default: 0.5, published].
    #[arg(long)]
    pub plateau_factor: Option<f64>,
    /// Hidden channels [default: 64 CRNN/CLSTM, 256 FCNN; published].
    #[arg(long)]
    pub channels: Option<usize>,
    /// Residual blocks [default: 8 CRNN/CLSTM, 32 FCNN; published].
    #[arg(long)]
    pub res_blocks: Option<usize>,
    /// Residual branch scale [default: 1 CRNN/CLSTM (published: no
    /// scaling), 0.1 FCNN (published)].
    #[arg(long)]
    pub res_scale: Option<f64>,
    /// Output directory for checkpoints, the loss log and the manifest
    /// [default: run].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint, keeping its optimizer state.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Test video (.y4m, .pgm, or a directory of .pgm frames); repeatable.
    #[arg(long, value_name = "PATH", required = true)]
    pub data: Vec<PathBuf>,
    /// Report directory.
    #[arg(long, value_name = "DIR", default_value = "report")]
    pub out: PathBuf,
    /// Series label [default: the architecture tag].
    #[arg(long)]
    pub label: Option<String>,
    /// Skip the copy-last-frame baseline series.
    #[arg(long)]
    pub no_baseline: bool,
    /// Training log to chart, as LABEL=PATH; repeatable. Without it,
    /// train_log.csv next to the checkpoint is used when present.
    #[arg(long, value_name = "LABEL=PATH")]
    pub train_log: Vec<String>,
    /// Also write the predicted frames as <video>__pred.y4m.
    #[arg(long)]
    pub save_predictions: bool,
    /// Frames to time for the fps line of the summary; 0 skips timing.
    #[arg(long, default_value_t = 0)]
    pub bench_frames: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Architecture with default sizes.
    #[arg(long, value_enum, default_value = "crnn")]
    pub model: ModelArg,
    /// Time this checkpoint instead of a freshly initialized model.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Frame size HxW; the default is the published crop size.
    #[arg(long, value_name = "HxW", default_value = "184x184", value_parser = settings::parse_dims)]
    pub dims: (usize, usize),
    /// Timed frames (local default).
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    /// Untimed frames before timing starts (local default).
    #[arg(long, default_value_t = predlab::evaluation::DEFAULT_WARMUP)]
    pub warmup: usize,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Motion pattern.
    #[arg(long, value_enum, default_value = "translate")]
    pub kind: KindArg,
    /// Frame size HxW.
    #[arg(long, value_name = "HxW", default_value = "64x64", value_parser = settings::parse_dims)]
    pub dims: (usize, usize),
    /// Number of frames.
    #[arg(long, default_value_t = 120)]
    pub len: usize,
    /// Pixels per frame as DY,DX (ignored by noise).
    #[arg(long, value_name = "DY,DX", default_value = "1,0", allow_hyphen_values = true, value_parser = settings::parse_velocity)]
    pub velocity: (i64, i64),
    /// Output path: .y4m file, or a directory for .pgm frames
    /// [default: <kind>-<seed>.y4m].
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Print only this architecture's count [default: all three].
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of consecutive seeds to audit, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

/// Collects the run manifest while a command runs.
pub struct Recorder {
    manifest: Option<RunManifest>,
    path: Option<PathBuf>,
}

impl Recorder {
    fn new(path: Option<PathBuf>) -> Self {
        Recorder {
            manifest: None,
            path,
        }
    }

    pub fn begin(
        &mut self,
        command: &str,
        config: &predlab::config::KeyValues,
        seed: u64,
        default_path: Option<PathBuf>,
    ) {
        self.manifest = Some(RunManifest::start(command, config, seed));
        if self.path.is_none() {
            self.path = default_path;
        }
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        if let Some(m) = &mut self.manifest {
            m.artifacts.push(path.into());
        }
    }

    pub fn config_hash(&self) -> String {
        self.manifest
            .as_ref()
            .map(|m| m.config_hash.clone())
            .unwrap_or_default()
    }

    fn finish(self, outcome: &Result<(), CliError>) {
        let (Some(mut m), Some(path)) = (self.manifest, self.path) else {
            return;
        };
        if let Err(e) = outcome {
            m.exit_code = e.exit_code();
            m.error = Some(e.to_string());
        }
        if let Err(e) = m.write(&path) {
            eprintln!("warning: could not write manifest {}: {e}", path.display());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let manifest_path = match &cli.command {
        Command::Train(a) => a.common.manifest.clone(),
        Command::Eval(a) => a.common.manifest.clone(),
        Command::Bench(a) => a.common.manifest.clone(),
        Command::Gen(a) => a.common.manifest.clone(),
        Command::Params(a) => a.common.manifest.clone(),
        Command::Gradcheck(a) => a.common.manifest.clone(),
    };
    let mut rec = Recorder::new(manifest_path);
    let outcome = match &cli.command {
        Command::Train(a) => commands::train(a, &mut rec),
        Command::Eval(a) => commands::eval(a, &mut rec),
        Command::Bench(a) => commands::bench(a, &mut rec),
        Command::Gen(a) => commands::gen(a, &mut rec),
        Command::Params(a) => commands::params(a, &mut rec),
        Command::Gradcheck(a) => commands::gradcheck(a, &mut rec),
    };
    rec.finish(&outcome);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
