//! `gvpj`: simulate Gaussian Volterra paths with jumps, compute prediction
//! laws, run the verification suite and solve the mfBm Wiener–Hopf system.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numerical failure or failed
//! checks, 3 I/O.

mod commands;
mod config;
mod error;
mod formats;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gvpj", version, about = "Prediction laws of Gaussian Volterra processes with jumps")]
struct Cli {
    /// Worker threads for Monte Carlo checks.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one path and write path.csv and manifest.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Compute the conditional law from a simulated path.
    Predict {
        #[arg(long)]
        config: PathBuf,
        /// Path CSV with columns time,G,J,X.
        #[arg(long)]
        path: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Run the invariant and oracle suite and write report.json.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: OverrideArgs,
        #[arg(long)]
        mc_paths: Option<usize>,
        /// Multiplies every tolerance of the suite.
        #[arg(long)]
        tolerance_scale: Option<f64>,
    },
    /// Solve the mfBm Wiener–Hopf system, or load it from the cache.
    SolveWh {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

#[derive(Debug, Args)]
struct OverrideArgs {
    #[arg(long)]
    hurst: Option<f64>,
    /// Number of grid cells.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    u: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    /// Value-grid half-width in standard deviations.
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    tail_tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    wh_cache: Option<PathBuf>,
}

impl OverrideArgs {
    fn into_overrides(self) -> Overrides {
        Overrides {
            hurst: self.hurst,
            n: self.n,
            horizon: self.horizon,
            lambda: self.lambda,
            u: self.u,
            t: self.t,
            width: self.width,
            tail_tol: self.tail_tol,
            seed: self.seed,
            out_dir: self.out_dir,
            wh_cache: self.wh_cache,
            ..Overrides::default()
        }
    }
}

fn resolve(config: Option<&PathBuf>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(CliError::Validation("--threads: must be at least 1".into()));
    }
    match cli.command {
        Command::Simulate { config, overrides } => {
            let cfg = resolve(Some(&config), &overrides.into_overrides())?;
            let path = commands::cmd_simulate(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Predict {
            config,
            path,
            overrides,
        } => {
            let cfg = resolve(Some(&config), &overrides.into_overrides())?;
            print_json(&commands::cmd_predict(&cfg, &path)?)?;
        }
        Command::Verify {
            config,
            overrides,
            mc_paths,
            tolerance_scale,
        } => {
            let mut o = overrides.into_overrides();
            o.mc_paths = mc_paths;
            o.tolerance_scale = tolerance_scale;
            let cfg = resolve(config.as_ref(), &o)?;
            let report = commands::cmd_verify(&cfg, cli.threads)?;
            for c in &report.checks {
                let tag = if c.pass { "PASS" } else { "FAIL" };
                println!("{tag} {}: {:.3e} (tol {:.3e}) {}", c.id, c.value, c.tolerance, c.description);
            }
            let failed = report.checks.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                return Err(CliError::ChecksFailed(format!(
                    "{failed} of {} checks failed",
                    report.checks.len()
                )));
            }
        }
        Command::SolveWh { config, overrides } => {
            let cfg = resolve(Some(&config), &overrides.into_overrides())?;
            print_json(&commands::cmd_solve_wh(&cfg)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
