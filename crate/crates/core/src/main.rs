use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fragstop::harness::{self, exit, Overrides, RunConfig};
use fragstop::{fragsim, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fragstop", version, about = "Optimal stopping lines for fragmentation processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Size of the shared I∞ sample.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Fragmentation runs per ensemble.
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Freeze on |B|^γ(A + c) instead of the Z-consistent statistic.
    #[arg(long, global = true)]
    literal_theorem_statistic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve for b* and V*(c); JSON output.
    Solve,
    /// Run every verification check; JSON report, exit code 4 on failure.
    Verify,
    /// Solve over a grid of one parameter; CSV output.
    Sweep {
        /// q, c, gamma, theta, rate, split or shape.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values (may be empty).
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        grid: Vec<f64>,
    },
    /// Run a fragmentation ensemble; ensemble CSV to --out, summary JSON to stdout.
    Simulate,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: &Cli) -> Result<u8> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    Overrides {
        seed: cli.seed,
        samples: cli.samples,
        runs: cli.runs,
        literal_theorem_statistic: cli.literal_theorem_statistic,
    }
    .apply(&mut cfg);

    harness::with_workers(cli.workers, || -> Result<u8> {
        match &cli.command {
            Command::Solve => {
                let out = harness::cmd_solve(&cfg)?;
                output(cli.out.as_deref())?.write_all(harness::to_json(&out)?.as_bytes())?;
                Ok(exit::OK)
            }
            Command::Verify => {
                let report = harness::cmd_verify(&cfg)?;
                for c in &report.checks {
                    eprintln!("{}", c.line());
                }
                output(cli.out.as_deref())?.write_all(harness::to_json(&report)?.as_bytes())?;
                Ok(if report.passed { exit::OK } else { exit::VERIFICATION })
            }
            Command::Sweep { axis, grid } => {
                let rows = harness::cmd_sweep(&cfg, axis, grid)?;
                let mut w = output(cli.out.as_deref())?;
                harness::write_sweep_csv(&mut w, axis, &rows)?;
                w.flush()?;
                Ok(exit::OK)
            }
            Command::Simulate => {
                let (ensemble, summary) = harness::cmd_simulate(&cfg)?;
                let (_, params) = cfg.validated()?;
                if let Some(p) = &cli.out {
                    let mut w = BufWriter::new(File::create(p)?);
                    fragsim::write_frozen_csv(&mut w, &ensemble, &params)?;
                    w.flush()?;
                }
                if let Some(p) = &cfg.path_out {
                    let mut w = BufWriter::new(File::create(p)?);
                    harness::write_path_csv(&mut w, &harness::tagged_path(&ensemble, &params, cfg.horizon)?)?;
                    w.flush()?;
                }
                std::io::stdout().lock().write_all(harness::to_json(&summary)?.as_bytes())?;
                Ok(exit::OK)
            }
        }
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e))
        }
    }
}
