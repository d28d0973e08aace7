//! The `lest` command: phantom generation, SIG and SST training,
//! harmonization, synthesis, evaluation and a self-test.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{MetricsConfig, RunConfig, RESOLVED_CONFIG_FILE};
pub use report::MetricsReport;

/// Exit status for success, usage and configuration errors, and numeric
/// faults.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lest::Error),
    #[error("{}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("self-test failed: {0}")]
    SelfTest(String),
}

impl CliError {
    /// Module-qualified error code.
    pub fn code(&self) -> String {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Config { .. } => "cli::config".into(),
            CliError::Usage(_) => "cli::usage".into(),
            CliError::SelfTest(_) => "cli::selftest".into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numeric_fault() => EXIT_NUMERIC,
            CliError::SelfTest(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "lest",
    version,
    about = "Latent energy-based style translation for multi-site images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a multi-site phantom dataset.
    Gen(GenArgs),
    /// Train the site-invariant autoencoder (F, G, E, D).
    TrainSig(TrainSigArgs),
    /// Train the energy model for one target site on a frozen SIG bundle.
    TrainSst(TrainSstArgs),
    /// Translate a dataset to the energy model's target site.
    Harmonize(HarmonizeArgs),
    /// Generate new images in the target site's style.
    Synthesize(SynthesizeArgs),
    /// Score raw, harmonized or synthesized data.
    Evaluate(EvaluateArgs),
    /// Run gradient checks and invariants.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long)]
    pub per_site: Option<usize>,
    #[arg(long)]
    pub traveling: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainSigArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; its train split is used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Pixel-loss weight; 0 trains the no-pixel-loss ablation.
    #[arg(long)]
    pub lambda_pix: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainSstArgs {
    #[command(flatten)]
    pub common: Common,
    /// SIG bundle file or the directory holding it.
    #[arg(long)]
    pub sig: PathBuf,
    /// Dataset providing source images (train split, non-target sites).
    #[arg(long)]
    pub source: PathBuf,
    /// Dataset providing target images (train split, target site).
    #[arg(long)]
    pub target: PathBuf,
    /// Target site id; defaults to the most homogeneous site of `--target`.
    #[arg(long)]
    pub target_site: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Langevin steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    /// Energy bundle file or the directory holding it.
    #[arg(long)]
    pub ebm: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for Langevin noise; only used with `--noise`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inject Langevin noise at inference.
    #[arg(long)]
    pub noise: bool,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub ebm: PathBuf,
    #[arg(short = 'n', default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Inject Langevin noise while translating the mapped codes.
    #[arg(long)]
    pub stochastic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Pooled histogram distance of each site to the target.
    Hist,
    /// Site-classification probe on raw and harmonized data.
    Probe,
    /// Cross-site segmentation Dice and Jaccard.
    Seg,
    /// Similarity of synthesized images to the target site's originals.
    Synth,
    /// Traveling-subject SSIM to the target rendering.
    Travel,
    /// 2-D PCA embedding and site scatter ratio.
    Embed,
    /// Target-site ranking by intra-site PSNR.
    Rank,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Raw dataset directory.
    #[arg(long)]
    pub raw: PathBuf,
    /// Harmonized dataset directory, listing the same samples as `--raw`.
    #[arg(long)]
    pub harmonized: Option<PathBuf>,
    /// Directory of synthesized `.pgm` images.
    #[arg(long)]
    pub synth: Option<PathBuf>,
    /// Target site; defaults to the top-ranked site of the raw train split.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Random trials per gradient case.
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Reads `LEST_THREADS`. All work runs on the calling thread, so any
/// positive cap is honoured; malformed values are usage errors.
pub fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("LEST_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "LEST_THREADS must be a positive integer, got `{v}`"
            ))),
        },
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    thread_cap()?;
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::TrainSig(a) => commands::train_sig(a),
        Command::TrainSst(a) => commands::train_sst(a),
        Command::Harmonize(a) => commands::harmonize(a),
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Selftest(a) => commands::selftest(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}
