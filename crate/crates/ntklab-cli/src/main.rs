//! Experiment runner for infinite-width kernel theory at finite width.
//!
//! Every subcommand reads one TOML description, runs a deterministic
//! experiment, and writes CSV artifacts into the output directory. Reruns
//! of the same description and seed reproduce the artifacts byte for byte.
//!
//! Exit codes: 0 on success, 1 on configuration or execution errors, 2 when
//! every training cell of a sweep diverged.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands::{CommandReport, Ctx};
use crate::config::ExperimentKind;

#[derive(Parser)]
#[command(
    name = "ntklab",
    version,
    about = "Analytic infinite-width kernels and finite-width training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layerwise limiting kernels of a network on a fixed input set
    Kernel(RunArgs),
    /// Convergence of the finite-width tangent kernel toward its limit
    Empirical(RunArgs),
    /// Width scaling of training-induced parameter and kernel change
    Scaling(RunArgs),
    /// Gaussian vs orthogonal training-curve ensembles
    Dynamics(RunArgs),
    /// Steps-to-accuracy-threshold across learning rates
    LrSweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment description (TOML)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides the description's out_dir
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base seed; overrides the description's seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for the parallel backend
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Dotted-path description override, e.g. train.eta=0.01 (repeatable)
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Re-parse the written CSV files and fail on malformed output
    #[arg(long)]
    self_check: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, kind, run): (&RunArgs, ExperimentKind, fn(&Ctx) -> Result<CommandReport>) =
        match &cli.command {
            Command::Kernel(a) => (a, ExperimentKind::Kernel, commands::kernel),
            Command::Empirical(a) => (a, ExperimentKind::EmpiricalConvergence, commands::empirical),
            Command::Scaling(a) => (a, ExperimentKind::Scaling, commands::scaling),
            Command::Dynamics(a) => (a, ExperimentKind::DynamicsCompare, commands::dynamics),
            Command::LrSweep(a) => (a, ExperimentKind::LrSweep, commands::lr_sweep),
        };
    match execute(args, kind, run) {
        Ok(report) if report.cells > 0 && report.diverged == report.cells => {
            eprintln!("error: every training cell diverged");
            ExitCode::from(2)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(
    args: &RunArgs,
    kind: ExperimentKind,
    run: fn(&Ctx) -> Result<CommandReport>,
) -> Result<CommandReport> {
    let mut file = config::load(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        file.seed = seed;
    }
    if let Some(out) = &args.out {
        file.out_dir = out.clone();
    }
    config::expect_kind(&file, kind)?;
    init_workers(args.workers);
    let report = run(&Ctx { file })?;
    if args.self_check {
        let n = output::self_check(&report.files)?;
        println!("self-check ok: {n} files");
    }
    Ok(report)
}

#[cfg(feature = "parallel")]
fn init_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("warning: worker pool already initialized: {err}");
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn init_workers(workers: Option<usize>) {
    if workers.is_some() {
        eprintln!("warning: built without the parallel feature; --workers is ignored");
    }
}
