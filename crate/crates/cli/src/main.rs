mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "jsrnn",
    version,
    about = "Block compressed-sensing sampling and reconstruction network"
)]
struct Cli {
    /// key=value file with option defaults (overridden by flags).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model for one measurement rate.
    Train(TrainArgs),
    /// Reconstruct an image through a trained model.
    Reconstruct(ReconstructArgs),
    /// PSNR of every model on every test image, with a Gaussian baseline.
    Evaluate(EvaluateArgs),
    /// Run the gradient and data self-checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// 0.25, 0.10, 0.04 or 0.01.
    #[arg(long)]
    pub rate: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Model file to write; the loss CSV and optimizer state go next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, alias = "batch-size")]
    pub batch: Option<usize>,
    /// sgd, adam or select.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// on, off or auto.
    #[arg(long)]
    pub pretrain: Option<String>,
    #[arg(long)]
    pub pretrain_iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Suppress per-log loss lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// PGM output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory holding one model file per rate.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub test_dir: Option<PathBuf>,
    /// CSV report path; the text table is written alongside with a .txt extension.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seed of the Gaussian baseline matrices.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, hide = true)]
    pub perturb_backward: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(jsrnn::Error),
    /// Some verification check failed.
    Checks(usize),
}

impl From<jsrnn::Error> for CliError {
    fn from(e: jsrnn::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use jsrnn::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::Divergence { .. }) | CliError::Checks(_) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Checks(n) => write!(f, "{n} check(s) failed"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = config::Layers::load(cli.config.as_deref()).and_then(|layers| match &cli.command {
        Command::Train(a) => commands::train(a, &layers),
        Command::Reconstruct(a) => commands::reconstruct(a, &layers),
        Command::Evaluate(a) => commands::evaluate(a, &layers),
        Command::Verify(a) => commands::verify(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
