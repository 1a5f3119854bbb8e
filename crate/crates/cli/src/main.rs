//! `lopa`: run allocation experiments from a TOML scenario.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver error, 4 I/O error.

mod artifact;
mod commands;
mod failure;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lopa_core::allocator::AllocatorKind;
use lopa_core::fom::MomentumScheme;

use artifact::{OutDir, Provenance};
use failure::Failure;
use scenario::Scenario;

#[derive(Debug, Parser)]
#[command(name = "lopa", version, about = "Learning-oriented uplink power allocation experiments")]
struct Cli {
    /// Scenario file; built-in reference scenario when omitted.
    #[arg(long, global = true, env = "LOPA_CONFIG")]
    config: Option<PathBuf>,
    /// Run a single seed instead of the scenario's seed list.
    #[arg(long, global = true, env = "LOPA_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "LOPA_OUT")]
    out: Option<PathBuf>,
    /// One of mm, fom, uniform, srm.
    #[arg(long, global = true, env = "LOPA_ALLOCATOR")]
    allocator: Option<AllocatorKind>,
    /// Plain projected gradient in the distributed solver.
    #[arg(long, global = true, env = "LOPA_NO_MOMENTUM")]
    no_momentum: bool,
    /// Leave timestamps and wall-clock times out of the artifacts.
    #[arg(long, global = true, env = "LOPA_NO_TIMESTAMP")]
    no_timestamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one channel draw per seed and write powers and traces.
    Allocate,
    /// Run the closed-loop federated simulation per seed.
    Simulate {
        #[arg(long)]
        rounds: Option<usize>,
        /// Also measure the loss-versus-dataset-size curve.
        #[arg(long)]
        loss_curve: bool,
    },
    /// Fit `a * n^-b` to an `n,loss` CSV file.
    Fit { path: PathBuf },
    /// Run every allocator on the same seeds and tabulate the results.
    Compare,
    /// Evaluate the convergence bound over `t = 0..=t_max`.
    Bound {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        t_max: Option<u32>,
    },
}

fn resolve(cli: &Cli) -> Result<Scenario, Failure> {
    let mut sc = match &cli.config {
        Some(path) => Scenario::load(path)?,
        None => Scenario::default(),
    };
    if let Some(seed) = cli.seed {
        sc.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        sc.out = out.clone();
    }
    if let Some(kind) = cli.allocator {
        sc.allocator = kind;
    }
    if cli.no_momentum {
        sc.solver.fom.momentum = MomentumScheme::Off;
    }
    match &cli.command {
        Command::Simulate {
            rounds: Some(r), ..
        } => sc.online.rounds = *r,
        Command::Bound { alpha, t_max } => {
            if let Some(a) = alpha {
                sc.bound.alpha = *a;
            }
            if let Some(t) = t_max {
                sc.bound.t_max = *t;
            }
        }
        _ => {}
    }
    sc.validate()?;
    Ok(sc)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let sc = resolve(&cli)?;
    let provenance = Provenance {
        scenario_sha256: sc.digest(),
        timestamp: !cli.no_timestamp,
    };
    let out = OutDir::create(&sc.out, provenance)?;
    out.write("scenario.toml", None, sc.to_toml().as_bytes())?;
    match &cli.command {
        Command::Allocate => commands::allocate(&sc, &out),
        Command::Simulate { loss_curve, .. } => commands::simulate(&sc, &out, *loss_curve),
        Command::Fit { path } => commands::fit(path, &out).map(|_| ()),
        Command::Compare => commands::compare(&sc, &out, !cli.no_timestamp),
        Command::Bound { .. } => commands::bound(&sc, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lopa: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
