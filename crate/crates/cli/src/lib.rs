//! Batch command-line harness: data generation, training, evaluation and the
//! causal analyses, each run writing metrics and artifacts to its own
//! directory.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Validation finishes before the output directory exists;
//! a run that fails later leaves an `INCOMPLETE` marker behind.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;
pub mod settings;
pub mod suite;

pub use commands::{execute, Command};
pub use config::Config;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error[usage]: {m}"),
            CliError::Validation(m) => write!(f, "error[validation]: {m}"),
            CliError::Runtime(m) => write!(f, "error[runtime]: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "tlt", version, about = "Treatment-learning causal transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value`, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Render the train and test datasets.
    GenData(Common),
    /// Train a model on `paths.train_data`.
    Train(Common),
    /// Accuracy and treatment-inference accuracy on `paths.test_data`.
    Eval(Common),
    /// Observational and interventional treatment effects.
    Ate(Common),
    /// Common-cause, placebo and subset refutations.
    Refute(Common),
    /// Treatment-feature ratio per encoder layer.
    Tfr(Common),
    /// Grad-CAM maps and their overlap with object masks.
    Saliency(Common),
    /// Posterior means per record.
    ExportLatents(Common),
    /// Treatment-by-variant accuracy and effect table.
    Suite(Common),
}

impl Sub {
    fn split(self) -> (Command, Common) {
        match self {
            Sub::GenData(c) => (Command::GenData, c),
            Sub::Train(c) => (Command::Train, c),
            Sub::Eval(c) => (Command::Eval, c),
            Sub::Ate(c) => (Command::Ate, c),
            Sub::Refute(c) => (Command::Refute, c),
            Sub::Tfr(c) => (Command::Tfr, c),
            Sub::Saliency(c) => (Command::Saliency, c),
            Sub::ExportLatents(c) => (Command::ExportLatents, c),
            Sub::Suite(c) => (Command::Suite, c),
        }
    }
}

/// Effective configuration: defaults < file < `--override` < flags.
fn resolve(common: &Common) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", common.config.display())))?;
    let file = config::parse_text(&text)?;
    let overrides = common.overrides.iter().map(|o| config::parse_override(o)).collect::<Result<Vec<_>, _>>()?;
    let mut cfg = Config::layered(&file, &overrides)?;
    if let Some(s) = common.seed {
        cfg.set("seed", s.to_string())?;
    }
    if let Some(o) = &common.out {
        let o = o.to_str().ok_or_else(|| CliError::Validation("--out must be valid UTF-8".into()))?;
        cfg.set("paths.out", o)?;
    }
    Ok(cfg)
}

/// Parses the command line and runs it; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            let err = CliError::Usage(text.trim_start_matches("error: ").trim_end().to_string());
            eprintln!("{err}");
            return err.exit_code();
        }
    };
    let (cmd, common) = cli.command.split();
    match resolve(&common).and_then(|cfg| execute(cmd, &cfg)) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
