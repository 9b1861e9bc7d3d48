//! Command-line surface for training hierarchies, extracting spectra,
//! propagating response maps, KNN evaluation and the exact oracle.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

pub mod analysis;
pub mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub(crate) fn context(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            CliError::Config(m) => CliError::Config(format!("{p}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{p}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{p}: {m}")),
        }
    }
}

impl From<hfmca::Error> for CliError {
    fn from(e: hfmca::Error) -> Self {
        use hfmca::Error as E;
        match e {
            E::Io(_) => CliError::Io(e.to_string()),
            E::Numerical(_) | E::NonFinite(_) | E::Linalg(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "hfmca", version, about = "Hierarchical functional maximal correlation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub args: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a network and write checkpoint.bin and costs.csv.
    Train,
    /// Eigenvalues of every layer, or the alignment of two checkpoints.
    Spectrum,
    /// Density-ratio response maps for one evaluation image.
    Telescope,
    /// KNN accuracy of the frozen backbone features.
    Knn,
    /// Exact decomposition of a joint table or chain from the config.
    Oracle,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Restricts spectrum/telescope output to one scale (1-based).
    #[arg(long, global = true)]
    pub layer: Option<usize>,
    /// Evaluation image index for telescope.
    #[arg(long, global = true, default_value_t = 0)]
    pub image: usize,
    /// Neighbour count for knn; overrides the config.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Defaults to `<out>/checkpoint.bin`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Second checkpoint for cross-model spectrum mode.
    #[arg(long = "checkpoint-b", global = true)]
    pub checkpoint_b: Option<PathBuf>,
}

impl CommonArgs {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.bin"))
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = match &cli.args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .resolve(cli.args.seed)?;
    std::fs::create_dir_all(&cli.args.out)
        .map_err(|e| CliError::Io(format!("{}: {e}", cli.args.out.display())))?;
    match cli.command {
        Command::Train => commands::train(&config, &cli.args),
        Command::Spectrum => commands::spectrum(&config, &cli.args),
        Command::Telescope => commands::telescope(&config, &cli.args),
        Command::Knn => commands::knn(&config, &cli.args),
        Command::Oracle => commands::oracle(&config, &cli.args),
    }
}
