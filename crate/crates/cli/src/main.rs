mod commands;
mod config;
mod manifest;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Anything failing while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "camoforge", version, about = "Adversarial vehicle camouflage against overhead detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render an annotated synthetic overhead dataset.
    GenerateData(GenerateArgs),
    /// Train and calibrate toy detectors on a dataset.
    Train(TrainArgs),
    /// Optimize an adversarial texture and/or shape against trained detectors.
    Attack(AttackArgs),
    /// Score camouflage artifacts on matched original/adversarial scenes.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// Flat `key = value` file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory (default: $CAMO_FORGE_HOME/<command>/<run id>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for data-parallel stages.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub empty_fraction: Option<f64>,
    /// `train` or `transfer`.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub max_vehicles: Option<usize>,
    /// Share of vehicles wearing random patterns instead of factory paint.
    #[arg(long)]
    pub patterned_fraction: Option<f64>,
    /// Directory of PNG background tiles (default: procedural).
    #[arg(long)]
    pub backgrounds: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by generate-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Calibration/validation dataset (default: the training set).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// `cnnA`, `cnnB`, `cnnC` or `all`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of calibrated `*.cfw` detector archives.
    #[arg(long)]
    pub detectors: Option<PathBuf>,
    /// `texture`, `shape`, `combined-seq` or `combined-par`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub pix: bool,
    #[arg(long)]
    pub ma: bool,
    #[arg(long)]
    pub lc: bool,
    #[arg(long)]
    pub fc: bool,
    #[arg(long)]
    pub pm: Option<f64>,
    /// Comma-separated ascending PM values; one artifact set per value.
    #[arg(long)]
    pub pm_grid: Option<String>,
    #[arg(long)]
    pub n_pll: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub shape_lr: Option<f64>,
    /// `adam` or `gd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Comma-separated per-detector weights, or `auto`.
    #[arg(long)]
    pub lambdas: Option<String>,
    /// Distinct scenes sampled for the attack pool.
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub scenes_per_epoch: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub n_colors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub backgrounds: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub detectors: Option<PathBuf>,
    /// Attack run directories; omitted means the identity camouflage.
    #[arg(long, num_args = 1..)]
    pub camo: Vec<PathBuf>,
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub backgrounds: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::GenerateData(a) => commands::generate_data(a),
        Command::Train(a) => commands::train(a),
        Command::Attack(a) => commands::attack(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
