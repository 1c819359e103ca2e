//! Configuration-driven verification runner.
//!
//! Subcommands: `run <config>` executes one scenario and writes report.json,
//! terms.csv and manifest.json into the run directory; `catalog` prints the
//! registered templates; `sweep <config>` runs the convergence study
//! described by the config's [sweep] table.
//!
//! Exit codes: 0 all thresholds pass, 1 threshold violation, 2 configuration
//! error. The worker count comes from `--workers` or the IWL_WORKERS
//! environment variable; outputs are byte-identical at any worker count.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iwl_core::runner::{run_sweep, run_to_dir};
use iwl_core::scenario::{catalog_text, load_config};
use iwl_core::EngineError;

#[derive(Parser)]
#[command(name = "iwl", version, about = "Term-by-term verification of measure-flow expansion formulas")]
struct Cli {
    /// Worker threads for the Monte Carlo world loop (default: all cores;
    /// env: IWL_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one scenario config and write its run directory.
    Run {
        config: PathBuf,
        /// Run directory override (default: output.dir from the config, then
        /// runs/<name>-<formula>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the registered test functions, measure functionals, dynamics
    /// templates and formula tokens.
    Catalog,
    /// Run the convergence study described by the config's [sweep] table.
    Sweep {
        config: PathBuf,
        /// Directory for sweep.json (default: output.dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_PASS: u8 = 0;
const EXIT_THRESHOLD: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn resolve_workers(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("IWL_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn fail(err: &EngineError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(EXIT_CONFIG)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let workers = resolve_workers(cli.workers);
    match cli.command {
        Command::Run { config, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match run_to_dir(&cfg, out.as_deref(), workers) {
                Ok(a) => {
                    println!(
                        "{} [{}/{}] residual mean {:.3e} +- {:.3e} (threshold {:.3e}) -> {}",
                        cfg.name,
                        a.report.formula,
                        a.report.mode,
                        a.report.mean_residual,
                        a.report.se,
                        a.threshold,
                        if a.pass { "pass" } else { "FAIL" },
                    );
                    println!("report: {}", a.report_path.display());
                    if let Some(p) = &a.terms_path {
                        println!("terms: {}", p.display());
                    }
                    println!("manifest: {}", a.manifest_path.display());
                    ExitCode::from(if a.pass { EXIT_PASS } else { EXIT_THRESHOLD })
                }
                Err(e) => fail(&e),
            }
        }
        Command::Catalog => {
            print!("{}", catalog_text());
            ExitCode::from(EXIT_PASS)
        }
        Command::Sweep { config, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match run_sweep(&cfg, out.as_deref(), workers) {
                Ok(s) => {
                    println!(
                        "{} sweep {}: slope {:.3} +- {:.3} over {:?} -> {}",
                        cfg.name,
                        s.result.parameter,
                        s.result.slope,
                        s.result.slope_ci,
                        s.result.levels,
                        if s.pass { "pass" } else { "FAIL" },
                    );
                    if let Some(p) = &s.path {
                        println!("sweep: {}", p.display());
                    }
                    ExitCode::from(if s.pass { EXIT_PASS } else { EXIT_THRESHOLD })
                }
                Err(e) => fail(&e),
            }
        }
    }
}
