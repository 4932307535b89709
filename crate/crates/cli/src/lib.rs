//! Driver for the `ssnn` binary: synthetic data, training, evaluation,
//! verification suites and firing-rate dumps.

pub mod commands;
pub mod config;
pub mod verify;

use clap::{Args, Parser, Subcommand};

/// Exit codes: 0 success, 1 runtime failure, 2 configuration error,
/// 3 verification failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error(transparent)]
    Core(#[from] ssnn_core::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Verify(_) => 3,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "ssnn", version, about = "Shrinking spiking neural networks")]
pub struct Cli {
    /// Worker threads for per-image kernels (results do not depend on it).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a moving-bars event dataset.
    Synth(SynthArgs),
    /// Train a model and write metrics and checkpoints under the out dir.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run a verification suite.
    Verify {
        /// gradcheck, conservation, oracle, formulas or golden
        suite: String,
    },
    /// Write per-layer firing rates of a checkpoint on the test split.
    DumpFiringRates(DumpArgs),
}

/// Config-file overrides shared by every command that builds a model.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub width_scale: Option<String>,
    #[arg(long)]
    pub stage_timesteps: Option<String>,
    #[arg(long)]
    pub early_classifiers: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub lambda_mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch: Option<String>,
    #[arg(long)]
    pub lr0: Option<String>,
    #[arg(long)]
    pub lr_step: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    #[arg(long)]
    pub tau: Option<String>,
    #[arg(long)]
    pub theta: Option<String>,
    #[arg(long)]
    pub surrogate_a: Option<String>,
    #[arg(long)]
    pub detach_reset: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long)]
    pub data_dir: Option<String>,
    #[arg(long)]
    pub out_dir: Option<String>,
    #[arg(long)]
    pub frame_ms: Option<String>,
    #[arg(long)]
    pub input_size: Option<String>,
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub synth_samples: Option<String>,
    #[arg(long)]
    pub synth_size: Option<String>,
    #[arg(long)]
    pub synth_frames: Option<String>,
    #[arg(long)]
    pub synth_seed: Option<String>,
    #[arg(long)]
    pub test_fraction: Option<String>,
}

impl Overrides {
    /// Loads the config file (if any) and applies every given flag on top.
    pub fn resolve(&self) -> Result<config::RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => config::RunConfig::load(p)?,
            None => config::RunConfig::default(),
        };
        let flags = [
            ("arch", &self.arch),
            ("width_scale", &self.width_scale),
            ("stage_timesteps", &self.stage_timesteps),
            ("early_classifiers", &self.early_classifiers),
            ("lambda", &self.lambda),
            ("lambda_mode", &self.lambda_mode),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("lr0", &self.lr0),
            ("lr_step", &self.lr_step),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("tau", &self.tau),
            ("theta", &self.theta),
            ("surrogate_a", &self.surrogate_a),
            ("detach_reset", &self.detach_reset),
            ("seed", &self.seed),
            ("dtype", &self.dtype),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("frame_ms", &self.frame_ms),
            ("input_size", &self.input_size),
            ("classes", &self.classes),
            ("synth_samples", &self.synth_samples),
            ("synth_size", &self.synth_size),
            ("synth_frames", &self.synth_frames),
            ("synth_seed", &self.synth_seed),
            ("test_fraction", &self.test_fraction),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Generate the synthetic dataset under `<out_dir>/data` when no data dir is set.
    #[arg(long)]
    pub synth: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// Also write per-layer firing rates to this CSV.
    #[arg(long)]
    pub dump_firing_rates: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    // A second initialisation (e.g. in tests) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global();
    match cli.command {
        Command::Synth(a) => commands::synth(&a.overrides.resolve()?),
        Command::Train(a) => commands::train(a.overrides.resolve()?, a.synth),
        Command::Eval(a) => commands::eval(&a.overrides.resolve()?, &a.checkpoint, a.dump_firing_rates.as_deref()),
        Command::Verify { suite } => verify::run_suite(&suite),
        Command::DumpFiringRates(a) => commands::dump_firing_rates(&a.overrides.resolve()?, &a.checkpoint, &a.out),
    }
}
