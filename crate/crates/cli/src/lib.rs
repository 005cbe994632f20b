//! Command-line front end: configuration parsing, dispatch of the
//! simulation and diagnostic pipelines, and CSV/JSON emission.
//!
//! Exit status: 0 when the run (and any statistical check it carries)
//! passes, 1 on a statistical failure or a runtime error inside a module,
//! 2 on a configuration error.

pub mod config;
pub mod dispatch;
pub mod output;

use std::fmt;
use std::path::PathBuf;

use clap::Parser;

pub use config::{parse_config, ConfigError, RunConfig};
pub use dispatch::{dispatch, RunError};
pub use output::{Outcome, Table};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    /// Derived constants and algebra checks of the branching mechanism.
    MechInfo,
    /// Particle simulation with observables at sample times.
    SimRun,
    /// Dual SPDE replicas sampled at points and times.
    SpdeRun,
    /// Mean-field equation from an initial trace.
    MfeSolve,
    /// Moment-duality comparison of particle and SPDE estimates.
    DualCheck,
    /// Particle counts against the mean-field integral at decreasing times.
    CdiScan,
    /// Martingale and supermartingale diagnostics.
    DiagMartingale,
    /// Embedded-chain chi-square and absorption diagnostics.
    DiagChain,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::MechInfo => "mech-info",
            Subcommand::SimRun => "sim-run",
            Subcommand::SpdeRun => "spde-run",
            Subcommand::MfeSolve => "mfe-solve",
            Subcommand::DualCheck => "dual-check",
            Subcommand::CdiScan => "cdi-scan",
            Subcommand::DiagMartingale => "diag-martingale",
            Subcommand::DiagChain => "diag-chain",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Parser)]
#[command(name = "sbbm", version, about = "Self-catalytic branching Brownian motion toolkit")]
pub struct Cli {
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// TOML (or JSON) run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the replica counts.
    #[arg(long)]
    pub replicas: Option<usize>,
    /// Output directory (default: the config's output.directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output formats (default: the config's output.format).
    #[arg(long, value_enum)]
    pub format: Option<config::Format>,
}

/// Runs one invocation end to end and returns the exit status.
pub fn run(cli: &Cli) -> i32 {
    let mut cfg = match config::load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error[config]: {e}");
            return EXIT_CONFIG;
        }
    };
    cfg.apply_overrides(cli.seed, cli.replicas);
    if let Err(e) = cfg.validate_for(cli.subcommand) {
        eprintln!("error[config]: {e}");
        return EXIT_CONFIG;
    }
    let outcome = match dispatch(&cfg, cli.subcommand) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    let format = cli.format.unwrap_or(cfg.output.format);
    let generated_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    match output::write_outputs(&dir, cli.subcommand, format, &outcome, &generated_at) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Err(e) => {
            eprintln!("error[output]: {e}");
            return EXIT_FAIL;
        }
    }
    for line in &outcome.messages {
        println!("{line}");
    }
    println!("{}: {}", cli.subcommand, if outcome.pass { "PASS" } else { "FAIL" });
    if outcome.pass {
        EXIT_PASS
    } else {
        EXIT_FAIL
    }
}
