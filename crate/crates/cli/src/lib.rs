//! The `oneshot` command line: training, evaluation, augmentation,
//! merge-mode comparison, synthetic data export and cross-validation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod recipe;

pub use recipe::Recipe;

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad recipe, arguments or inputs that do not fit together (exit 2).
    Validation(String),
    /// Anything that went wrong while running (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<oneshot_core::Error> for CliError {
    fn from(e: oneshot_core::Error) -> Self {
        use oneshot_core::Error as E;
        match e {
            E::Config(_) | E::Shape(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "oneshot", version, about = "One-shot image pair identification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Overrides the recipe seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Upper bound on parallel workers.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Base directory for relative dataset paths (falls back to ONESHOT_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

impl Common {
    pub fn data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("ONESHOT_DATA_DIR").filter(|v| !v.is_empty()).map(PathBuf::from))
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one fold of a recipe and write report, checkpoint and test pairs.
    Train {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Score a pair manifest with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tab-separated `image_a image_b label` lines.
        #[arg(long)]
        pairs: PathBuf,
        /// Rank the candidates of each query instead of judging pairs.
        #[arg(long)]
        identify: bool,
    },
    /// Write augmented copies of every PGM under a directory.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        /// Augmentation settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Copies per input image; overrides the config.
        #[arg(long)]
        copies: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the merged CNN once stacked and once side by side.
    CompareMerging {
        /// Recipe to run; a synthetic anode recipe is used when omitted.
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Export a synthetic anode dataset as a PGM tree.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        views: usize,
        /// Generator settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every fold of a recipe and summarize.
    Crossval {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

pub(crate) fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, body).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}
