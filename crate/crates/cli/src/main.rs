//! `hiermo`: run three-tier momentum experiments, verify deviation bounds,
//! plan aggregation periods and replay traces on a delay profile.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand, ValueEnum};
use commands::{OptimizeArgs, TimelineArgs};
use config::{parse_seeds, ExperimentConfig};
use error::CliResult;
use hiermo::timeline::Architecture;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "hiermo", version, about)]
struct Cli {
    /// Suppress progress and result lines on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds overriding the config's list.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    TwoTier,
    ThreeTier,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (algorithm, seed) pair and write traces and a summary.
    Run(ConfigArgs),
    /// Estimate problem constants and check the deviation bounds.
    Bounds {
        #[command(flatten)]
        args: ConfigArgs,
        /// Write planner constants with this `mu` instead of the measured one.
        #[arg(long)]
        assume_mu: Option<f64>,
    },
    /// Choose aggregation periods (tau, pi) for a delay profile.
    Optimize {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        constants: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        init_tau: u32,
        #[arg(long, default_value_t = 1)]
        init_pi: u32,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        /// Also search the full grid 1..=N in both periods.
        #[arg(long)]
        grid: Option<u32>,
    },
    /// Place a trace on a wall-clock axis.
    Timeline {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        /// Target accuracy for time-to-accuracy.
        #[arg(long)]
        target: Option<f64>,
        /// Defaults to the trace's algorithm tier.
        #[arg(long, value_enum)]
        arch: Option<ArchArg>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print per-worker sample counts and label sets.
    PartitionStats(ConfigArgs),
}

fn resolve(args: &ConfigArgs) -> CliResult<(ExperimentConfig, Vec<u64>, PathBuf)> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let seeds = match &args.seeds {
        Some(s) => parse_seeds(s)?,
        None => cfg.seeds.clone(),
    };
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("out").to_owned());
    Ok((cfg, seeds, out))
}

fn execute(cli: Cli) -> CliResult<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Run(args) => {
            let (cfg, seeds, out) = resolve(&args)?;
            commands::cmd_run(&cfg, &seeds, &out, quiet).map(|_| ())
        }
        Command::Bounds { args, assume_mu } => {
            let (cfg, seeds, out) = resolve(&args)?;
            commands::cmd_bounds(&cfg, &seeds, &out, assume_mu, quiet)
        }
        Command::Optimize {
            profile,
            constants,
            out,
            init_tau,
            init_pi,
            max_iters,
            grid,
        } => commands::cmd_optimize(
            &OptimizeArgs {
                profile: &profile,
                constants: &constants,
                out: &out,
                init: (init_tau, init_pi),
                max_iters,
                grid,
            },
            quiet,
        ),
        Command::Timeline {
            trace,
            profile,
            target,
            arch,
            out,
        } => commands::cmd_timeline(
            &TimelineArgs {
                trace: &trace,
                profile: &profile,
                target,
                architecture: arch.map(|a| match a {
                    ArchArg::TwoTier => Architecture::TwoTier,
                    ArchArg::ThreeTier => Architecture::ThreeTier,
                }),
                out: &out,
            },
            quiet,
        )
        .map(|_| ()),
        Command::PartitionStats(args) => {
            let cfg = ExperimentConfig::load(&args.config)?;
            let seeds = match &args.seeds {
                Some(s) => parse_seeds(s)?,
                None => cfg.seeds.clone(),
            };
            commands::cmd_partition_stats(&cfg, &seeds, args.out.as_ref(), quiet)
        }
    }
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
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
