//! Argument parsing, overrides and exit codes.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ssvae_core::estimation::{CorollaryConfig, ScalingConfig};

use crate::commands::{self, BoundViolation};
use crate::config::{read_json, FitCmdConfig, GenConfig, ReportConfig, Seeded, VerifyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable overriding every enumeration cap.
pub const ENUM_CAP_VAR: &str = "SSVAE_ENUM_CAP";

#[derive(Debug, Parser)]
#[command(name = "ssvae", version, about = "Backward variational inference experiments on finite state space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the one in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a dataset from a model.
    Gen(Common),
    /// Run the bound suites and report certificates and constants.
    VerifyBounds(Common),
    /// Fit a model and a variational family to a dataset.
    Fit(Common),
    /// Excess risk against n and T.
    Scaling(Common),
    /// Restricted against realizable variational families.
    Corollary(Common),
    /// Summarize the JSON artifacts of a directory.
    Report(Common),
}

fn load<T: DeserializeOwned + Seeded + Serialize>(c: &Common, default: Option<T>) -> Result<T> {
    let mut cfg: T = match (&c.config, default) {
        (Some(p), _) => read_json(p)?,
        (None, Some(d)) => d,
        (None, None) => anyhow::bail!(Usage("--config is required for this command".into())),
    };
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Ok(v) = std::env::var(ENUM_CAP_VAR) {
        let cap = v
            .parse::<usize>()
            .with_context(|| format!("{ENUM_CAP_VAR}={v:?} is not a count"))
            .map_err(|e| Usage(format!("{e:#}")))?;
        cfg.set_cap(cap);
    }
    Ok(cfg)
}

/// Usage or configuration error; exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Exit code for an error: violations 2, optimizer and likelihood failures
/// 3, everything else (configuration, usage, I/O) 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<BoundViolation>().is_some() {
            return EXIT_VIOLATION;
        }
        if let Some(e) = cause.downcast_ref::<ssvae_core::Error>() {
            return match e {
                ssvae_core::Error::OptimizationFailure { .. }
                | ssvae_core::Error::ImpossibleObservation { .. } => EXIT_NUMERICAL,
                _ => EXIT_USAGE,
            };
        }
    }
    EXIT_USAGE
}

fn dispatch(command: &Command) -> Result<(&'static str, &Common)> {
    let run = |c: &Common, f: &(dyn Fn(&Path) -> Result<()> + Sync)| -> Result<()> {
        match c.threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .context("building the thread pool")?;
                pool.install(|| f(&c.out))
            }
            None => f(&c.out),
        }
    };
    Ok(match command {
        Command::Gen(c) => {
            let cfg: GenConfig = load(c, None)?;
            run(c, &|o| commands::cmd_gen(&cfg, o))?;
            ("gen", c)
        }
        Command::VerifyBounds(c) => {
            let cfg: VerifyConfig = load(c, Some(VerifyConfig::default()))?;
            run(c, &|o| commands::cmd_verify_bounds(&cfg, o))?;
            ("verify-bounds", c)
        }
        Command::Fit(c) => {
            let cfg: FitCmdConfig = load(c, None)?;
            run(c, &|o| commands::cmd_fit(&cfg, o))?;
            ("fit", c)
        }
        Command::Scaling(c) => {
            let cfg: ScalingConfig = load(c, None)?;
            run(c, &|o| commands::cmd_scaling(&cfg, o))?;
            ("scaling", c)
        }
        Command::Corollary(c) => {
            let cfg: CorollaryConfig = load(c, None)?;
            run(c, &|o| commands::cmd_corollary(&cfg, o))?;
            ("corollary", c)
        }
        Command::Report(c) => {
            let cfg: ReportConfig = load(c, Some(ReportConfig { input: None, seed: 0 }))?;
            run(c, &|o| commands::cmd_report(&cfg, o))?;
            ("report", c)
        }
    })
}

/// Parse `args` (program name first), run the command and return the exit
/// code. Wall-clock time goes to stderr only, so artifacts stay
/// reproducible.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    let start = Instant::now();
    match dispatch(&cli.command) {
        Ok((name, c)) => {
            eprintln!(
                "{name}: wrote {} (wall_ms={})",
                c.out.display(),
                start.elapsed().as_millis()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
