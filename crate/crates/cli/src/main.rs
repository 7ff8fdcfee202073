//! `spinrelax`: simulated adaptive relaxometry runs, protocol ranking,
//! estimator bias and speedup studies.
//!
//! Exit status 0 on success, 2 for configuration errors and 3 for runtime
//! failures.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spinrelax::harness::Optimizer;
use spinrelax::{Branch, RatePair};

use config::Preset;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl From<spinrelax::Error> for Failure {
    fn from(e: spinrelax::Error) -> Self {
        use spinrelax::Error::*;
        match e {
            InvalidRate { .. } | InvalidDelay { .. } | InvalidParameter { .. } | InvalidGrid(_) | InvalidConfig(_) => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "spinrelax", version, about = "Adaptive Bayesian spin-relaxometry simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run file (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "SPINRELAX_OUT", default_value = "spinrelax-out")]
    out: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate adaptive (nob, pf) or sweep (nap) experiments.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerArg>,
        /// Repetitions per signal, e.g. 1e6.
        #[arg(long = "R", value_parser = config::parse_count)]
        repetitions: Option<u64>,
        /// True rates in ms⁻¹: `gamma_plus,gamma_minus`, or one value for equal rates.
        #[arg(long, value_parser = config::parse_rates)]
        rates: Option<RatePair>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Rank all independent protocols by optimal cost.
    RankProtocols {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "R", value_parser = config::parse_count)]
        repetitions: Option<u64>,
        #[arg(long, value_parser = config::parse_rates)]
        rates: Option<RatePair>,
        /// Robust-versus-optimal cost ratio over Γ+/Γ− = lo..hi (n points, default 25).
        #[arg(long, value_parser = config::parse_span)]
        ratio_sweep: Option<(f64, f64, Option<usize>)>,
    },
    /// Bias of the reciprocal-mode estimator against repetitions.
    BiasStudy {
        #[command(flatten)]
        common: CommonArgs,
        /// Decades `lo:hi` (e.g. 1e3:1e7) or a comma list.
        #[arg(long = "R", value_parser = config::parse_counts)]
        repetitions: Option<config::Counts>,
        #[arg(long, value_enum)]
        branch: Option<BranchArg>,
        #[arg(long, hide = true, value_parser = config::parse_rates)]
        rates: Option<RatePair>,
    },
    /// Adaptive-versus-sweep speedup at equal rates.
    Speedup {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "R", value_parser = config::parse_count)]
        repetitions: Option<u64>,
        /// Rates in ms⁻¹: `lo:hi[:n]` log-spaced (5 points by default) or a comma list.
        #[arg(long, value_parser = config::parse_rate_list)]
        rates: Option<config::RateList>,
        /// Sweep budget as a multiple of the longest adaptive run.
        #[arg(long)]
        budget_factor: Option<f64>,
    },
    /// Print a run record as a table.
    Show {
        /// `record.jsonl` or the directory holding it.
        path: PathBuf,
        #[arg(long)]
        replicate: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum OptimizerArg {
    Nob,
    Pf,
    Nap,
}

impl From<OptimizerArg> for Optimizer {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Nob => Optimizer::Nob,
            OptimizerArg::Pf => Optimizer::Pf,
            OptimizerArg::Nap => Optimizer::Nap,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum BranchArg {
    Plus,
    Minus,
}

/// Options shared by the study subcommands after parsing.
pub struct Common {
    pub config: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub replicates: Option<usize>,
    pub repetitions: Option<u64>,
    pub rates: Option<RatePair>,
}

fn common(c: CommonArgs, repetitions: Option<u64>, rates: Option<RatePair>) -> Common {
    Common {
        config: c.config,
        preset: c.preset,
        seed: c.seed,
        out: c.out,
        replicates: c.replicates,
        repetitions,
        rates,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            common: c,
            optimizer,
            repetitions,
            rates,
            iterations,
        } => commands::simulate(commands::SimulateArgs {
            common: common(c, repetitions, rates),
            optimizer: optimizer.map(Into::into),
            iterations,
        }),
        Command::RankProtocols {
            common: c,
            repetitions,
            rates,
            ratio_sweep,
        } => commands::rank(commands::RankArgs {
            common: common(c, repetitions, rates),
            ratio_sweep,
        }),
        Command::BiasStudy {
            common: c,
            repetitions,
            branch,
            rates,
        } => commands::bias(commands::BiasArgs {
            common: common(c, None, rates),
            counts: repetitions,
            branch: branch.map(|b| match b {
                BranchArg::Plus => Branch::Plus,
                BranchArg::Minus => Branch::Minus,
            }),
        }),
        Command::Speedup {
            common: c,
            repetitions,
            rates,
            budget_factor,
        } => commands::speedup(commands::SpeedupArgs {
            common: common(c, repetitions, None),
            rate_list: rates,
            budget_factor,
        }),
        Command::Show { path, replicate } => commands::show(&path, replicate),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
