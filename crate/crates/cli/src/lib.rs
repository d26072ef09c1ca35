//! `ucoh` subcommands: dataset generation, training, evaluation, document
//! scoring and the self-check suite.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod eval;
pub mod gen;
pub mod manifest;
pub mod train;
pub mod verify;

pub use manifest::RunManifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] ucoh_core::Error),
    #[error("verification failed: {}", .0.join(", "))]
    Verify(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Verify(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, e: std::io::Error) -> Self {
        CliError::Data(ucoh_core::Error::io(path, e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ucoh", version, about = "Neural text coherence: datasets, training, evaluation, scoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build permutation pair datasets from a corpus or a synthetic spec.
    Gen(gen::GenArgs),
    /// Train a coherence model on a pair file.
    Train(train::TrainArgs),
    /// Pairwise discrimination accuracy of a checkpoint.
    Eval(eval::EvalArgs),
    /// Print the window scores and total score of one document.
    Score(eval::ScoreArgs),
    /// Run the invariant suite.
    Verify(verify::VerifyArgs),
}

/// Parses `args` (program name first) and runs the command, writing
/// human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}").map_err(|e| CliError::io("<stdout>", e))?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    match cli.command {
        Command::Gen(a) => gen::cmd_gen(&a, out).map(drop),
        Command::Train(a) => train::cmd_train(&a, out).map(drop),
        Command::Eval(a) => eval::cmd_eval(&a, out).map(drop),
        Command::Score(a) => eval::cmd_score(&a, out).map(drop),
        Command::Verify(a) => verify::cmd_verify(&a, out).map(drop),
    }
}

pub(crate) fn say(out: &mut dyn Write, text: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| CliError::io("<stdout>", e))
}

pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub(crate) fn create_dir(path: &std::path::Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub(crate) fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}
