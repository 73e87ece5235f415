//! `omnicap` command dispatch. Every command that produces artifacts writes
//! them under a fresh timestamped directory below the configured run root,
//! next to a `run.json` that records the resolved config and its hash.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod arena;
mod cascade;
mod cloze;
pub mod context;
mod detective;
pub mod error;
mod report;

pub use error::{CliError, EXIT_BACKEND, EXIT_CONFIG, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};

#[derive(Debug, Parser)]
#[command(name = "omnicap", version, about = "Audio-visual captioning evaluation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Persistent response cache directory.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Root under which run directories are created.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tool-using caption investigations.
    #[command(subcommand)]
    Detective(detective::DetectiveCmd),
    /// Cloze benchmark generation, export and scoring.
    #[command(subcommand)]
    Cloze(cloze::ClozeCmd),
    /// Caption-to-answer QA cascades.
    #[command(subcommand)]
    Cascade(cascade::CascadeCmd),
    /// Pairwise judging arena.
    #[command(subcommand)]
    Arena(arena::ArenaCmd),
    /// Render a saved report, or summarize a run directory.
    Report(report::ReportArgs),
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().ansi().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let g = &cli.global;
    match cli.command {
        Command::Detective(cmd) => detective::run(g, cmd, out),
        Command::Cloze(cmd) => cloze::run(g, cmd, out),
        Command::Cascade(cmd) => cascade::run(g, cmd, out),
        Command::Arena(cmd) => arena::run(g, cmd, out),
        Command::Report(args) => report::run(args, out),
    }
}

pub(crate) fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}
