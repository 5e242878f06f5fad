//! Command-line front end for the bound solver: generate constraint prices,
//! train dual bounds, cross-check against the exact transport program, and
//! run the sweep/convergence/timing studies. Every run is driven by a JSON
//! config plus a few override flags, and every output file embeds the fully
//! resolved config and seeds, so outputs are self-documenting and replayable.
//!
//! Exit codes: 0 success, 2 bad config or input, 3 payoff parse/binding
//! error, 4 training abort, 5 inconsistent price system, 6 size cap, 1 other.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfb_core::Error;

use crate::config::{DirectionChoice, Resolved, RunConfig};

#[derive(Parser)]
#[command(
    name = "mfb",
    version,
    about = "Model-free price bounds for multi-asset options from marginals and quoted instrument prices"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON; unknown keys are rejected).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output directory (overrides the config; default ".").
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Root seed (overrides the config; default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (overrides the config; default 1). Results do not
    /// depend on this value.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DirectedArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which bound(s) to compute (overrides the config; default both).
    #[arg(long, value_enum)]
    direction: Option<DirectionChoice>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Price the declared constraint instruments under the benchmark
    /// coupling; writes instruments.json.
    Generate(CommonArgs),
    /// Train dual networks for the target payoff; writes result.json.
    Bound(DirectedArgs),
    /// Cross-check prices and bounds against the exact transport program on
    /// a discretized instance (at most 3 assets); writes verify.json.
    Verify(DirectedArgs),
    /// Run the declared experiment cases over their strike ladders; writes
    /// one CSV per case plus sweep.json.
    Sweep(CommonArgs),
    /// Record per-iteration training traces at one strike; writes
    /// convergence.csv and convergence.json.
    Convergence(CommonArgs),
    /// Time a fixed training run across market dimensions; writes
    /// timing.csv and timing.json.
    Timing(CommonArgs),
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) => 2,
        Error::PayoffParse { .. } | Error::PayoffBinding(_) => 3,
        Error::TrainingAbort { .. } => 4,
        Error::Infeasible(_) => 5,
        Error::SizeCap(_) => 6,
        _ => 1,
    }
}

type CommandFn = fn(&Resolved) -> mfb_core::Result<()>;

fn run(cli: &Cli) -> mfb_core::Result<()> {
    let (common, direction, command): (&CommonArgs, Option<DirectionChoice>, CommandFn) =
        match &cli.cmd {
            Cmd::Generate(c) => (c, None, commands::cmd_generate),
            Cmd::Bound(d) => (&d.common, d.direction, commands::cmd_bound),
            Cmd::Verify(d) => (&d.common, d.direction, commands::cmd_verify),
            Cmd::Sweep(c) => (c, None, commands::cmd_sweep),
            Cmd::Convergence(c) => (c, None, commands::cmd_convergence),
            Cmd::Timing(c) => (c, None, commands::cmd_timing),
        };
    let config = RunConfig::load(&common.config)?;
    let resolved = Resolved::new(
        config,
        common.out.clone(),
        common.seed,
        common.threads,
        direction,
    )?;
    // Build the global pool once per process; a second call (tests linking
    // this binary multiple times never happens, but defensive anyway) is a
    // no-op and results never depend on pool size.
    rayon::ThreadPoolBuilder::new()
        .num_threads(resolved.threads)
        .build_global()
        .ok();
    std::fs::create_dir_all(&resolved.out_dir)?;
    command(&resolved)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
