//! `dpanet` command-line driver.
//!
//! ```text
//! dpanet gen-data  --out DIR [--count N]
//! dpanet train     --data DIR --out DIR [--epochs N]
//! dpanet eval      --checkpoint PATH --data DIR --out DIR
//! dpanet infer     --checkpoint PATH --data DIR --out DIR
//! dpanet gradcheck
//! ```
//!
//! Global options: `--config PATH`, `--seed U64`, and any configuration key
//! as `--key=value`. Exit status is 0 on success, 2 for an invalid
//! configuration and 1 for a runtime failure.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dpanet", version, about = "Dual-pixel defocus deblurring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Number of triplets to generate.
    #[arg(long, global = true)]
    count: Option<usize>,
    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write synthetic dual-pixel triplets and manifest.json.
    GenData,
    /// Train on a dataset directory; writes checkpoints and the epoch log.
    Train,
    /// Restore a dataset with ground truth and write metrics.csv.
    Eval,
    /// Restore (L, R) pairs without ground truth.
    Infer,
    /// Finite-difference checks of every differentiable operator.
    Gradcheck,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit status 2.
    Usage(String),
    /// Failure while running a command; exit status 1.
    Runtime(String),
    /// Help or version text; exit status 0.
    Info(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
            CliError::Info(_) => 0,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Info(m) => f.write_str(m),
        }
    }
}

impl From<dpanet::Error> for CliError {
    fn from(e: dpanet::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Names clap handles itself; everything else of the form `--key=value`
/// is a configuration override.
const FLAGS: &[&str] = &[
    "config",
    "seed",
    "out",
    "data",
    "checkpoint",
    "count",
    "epochs",
    "help",
    "version",
];

/// Splits `--key=value` configuration overrides from the arguments clap
/// parses.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        let Some((key, value)) = arg
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .and_then(|s| s.split_once('='))
        else {
            rest.push(arg);
            continue;
        };
        let key = key.replace('-', "_");
        if FLAGS.contains(&key.as_str()) {
            rest.push(arg);
        } else if config::is_key(&key) {
            overrides.push((key, value.to_owned()));
        } else {
            return Err(CliError::Usage(format!(
                "unknown configuration key `{key}`; known keys: {}",
                config::KEYS.join(", ")
            )));
        }
    }
    Ok((rest, overrides))
}

/// Parses arguments (including the program name) into a command and a
/// fully resolved configuration.
pub fn resolve(args: Vec<OsString>) -> Result<(Command, RunConfig), CliError> {
    let (rest, overrides) = split_overrides(args)?;
    let cli = Cli::try_parse_from(rest).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::Info(e.render().to_string())
        }
        _ => CliError::Usage(e.render().to_string()),
    })?;
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path).map_err(CliError::Usage)?;
    }
    let named = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("out", cli.out.map(|p| p.display().to_string())),
        ("data", cli.data.map(|p| p.display().to_string())),
        ("checkpoint", cli.checkpoint.map(|p| p.display().to_string())),
        ("count", cli.count.map(|v| v.to_string())),
        ("total_epochs", cli.epochs.map(|v| v.to_string())),
    ];
    for (key, value) in named.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))) {
        cfg.set(key, &value).map_err(CliError::Usage)?;
    }
    for (key, value) in &overrides {
        cfg.set(key, value).map_err(CliError::Usage)?;
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok((cli.command, cfg))
}

/// Runs the command line and returns the process exit status.
pub fn run(args: Vec<OsString>) -> i32 {
    let result = resolve(args).and_then(|(command, cfg)| commands::execute(command, &cfg));
    match result {
        Ok(()) => 0,
        Err(CliError::Info(m)) => {
            print!("{m}");
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
