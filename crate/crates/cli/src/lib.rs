//! `pathbench` command-line driver: tile → stainfit/augment → embed →
//! probe/mil → report.
//!
//! Exit codes: 0 success, 2 invalid usage/config/input, 1 runtime failure.

pub mod commands;
pub mod config;
pub mod inputs;
pub mod selftest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use pathbench_core::augment::ColorSpace;
use pathbench_core::Error as CoreError;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Validation(_)
                | CoreError::InvalidArgument(_)
                | CoreError::Shape(_)
                | CoreError::DimMismatch { .. }
                | CoreError::MissingLabel(_)
                | CoreError::MissingSlide(_)
                | CoreError::MissingKey { .. } => 2,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

const OVERRIDE_HELP: &str = "\
Any config key can be set with --section.key=value, e.g. --tiling.patch_size=256 \
or --probe.lr=0.05. Precedence: config file < overrides < named flags. \
The seed comes from --seed, else the config, else PATHBENCH_SEED, else 0.";

#[derive(Debug, Parser)]
#[command(name = "pathbench", version, about = "Histopathology tiling, augmentation and frozen-feature evaluation")]
#[command(after_help = OVERRIDE_HELP)]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Global seed for every stochastic stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile slides into tissue patches and write a manifest.
    Tile(TileArgs),
    /// Fit a stain template from manifest patches.
    Stainfit(StainfitArgs),
    /// Write one augmented view of a patch.
    Augment(AugmentArgs),
    /// Encode manifest patches into one .hemb file per slide.
    Embed(EmbedArgs),
    /// Linear-probe evaluation on patch embeddings.
    Probe(ProbeArgs),
    /// Attention-MIL evaluation on slide bags.
    Mil(MilArgs),
    /// Validate a report and print its metrics.
    Report(ReportArgs),
    /// Generate a synthetic slide and run tile → embed → probe end to end.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Slide file, pyramid directory, or directory of slides (repeatable).
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patch_size: Option<u32>,
    /// Minimum tissue fraction for a patch to be kept.
    #[arg(long)]
    pub min_tissue: Option<f64>,
    #[arg(long)]
    pub thumbnail_max_dim: Option<u32>,
    #[arg(long)]
    pub level: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StainfitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the manifest's slides live (default: the manifest's directory).
    #[arg(long, num_args = 1..)]
    pub slides: Vec<PathBuf>,
    #[arg(long)]
    pub space: Option<ColorSpace>,
    /// Fit on a seeded sample of at most this many patches.
    #[arg(long)]
    pub max_patches: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Stain template; without one, stain augmentation is skipped.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, num_args = 1..)]
    pub slides: Vec<PathBuf>,
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Directory of .hemb files.
    #[arg(long)]
    pub features: PathBuf,
    /// JSON-lines dataset: {key, slide_id?, label, split?}.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the selected model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MilArgs {
    /// Directory of .hemb files, one bag per slide.
    #[arg(long)]
    pub bags: PathBuf,
    /// JSON object mapping slide id to class.
    #[arg(long)]
    pub labels: PathBuf,
    /// Restrict and order bag instances by this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Train, val, test ratios, e.g. 0.8,0.1,0.1.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Output directory for the manifest, embeddings and report.
    #[arg(long)]
    pub out: PathBuf,
    /// Slide side length in pixels.
    #[arg(long, default_value_t = selftest::DEFAULT_SIZE)]
    pub size: u32,
}

/// Splits `--section.key=value` overrides from the arguments clap parses.
fn partition_args(argv: Vec<OsString>) -> (Vec<OsString>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for (i, a) in argv.into_iter().enumerate() {
        match a.to_str() {
            Some(s) if i > 0 && config::is_override(s) => overrides.push(s.to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (args, overrides) = partition_args(argv.into_iter().map(Into::into).collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli, overrides: &[String]) -> CliResult<()> {
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let mut cfg = config::load(cli.config.as_deref(), overrides, cli.seed, env_seed.as_deref())?;
    commands::apply_flags(&cli.command, &mut cfg)?;
    cfg.validate()?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    match cli.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be >= 1".into())),
        Some(n) => pool = pool.num_threads(n),
        None => {}
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Core(CoreError::Io(std::io::Error::other(format!("thread pool: {e}")))))?;
    pool.install(|| commands::dispatch(&cli.command, &cfg))
}
