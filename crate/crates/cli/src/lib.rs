//! Command-line front end: configs, datasets, checkpoints and metric files.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Train(#[from] bkrnet::estimate::TrainError),
    #[error(transparent)]
    Pde(#[from] bkrnet::pdesolve::PdeError),
    #[error(transparent)]
    Problem(#[from] bkrnet::problems::ProblemError),
    #[error(transparent)]
    Flow(#[from] bkrnet::flow::FlowError),
    #[error(transparent)]
    Density(#[from] bkrnet::density::DensityError),
    #[error("{0}")]
    Mismatch(String),
    #[error("run aborted at epoch {epoch}: {message}; last good state saved to {}", checkpoint.display())]
    Aborted {
        epoch: usize,
        checkpoint: PathBuf,
        message: String,
    },
}

impl CliError {
    /// Process exit status: 2 for invalid input, 1 for run failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Mismatch(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bkrnet", version, about = "Bounded KR flows for density estimation and density PDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw samples from a reference distribution.
    GenData {
        #[arg(long)]
        truth: String,
        #[arg(short = 'n')]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Append the exact log-density as a `true_logp` column.
        #[arg(long)]
        with_logp: bool,
    },
    /// Fit a flow to samples by maximum likelihood.
    TrainDensity {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Benchmark name, overriding `problem` in the config.
        #[arg(long)]
        truth: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from these parameters and RNG state.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Solve a density PDE with adaptive collocation.
    SolvePde {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Benchmark name, overriding `problem` in the config.
        #[arg(long)]
        problem: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw samples from a trained model.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short = 'n')]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Unknown to sample for PDE systems, counted from 1.
        #[arg(long, default_value_t = 1)]
        unknown: usize,
    },
    /// Score a trained model on fresh points, or tabulate it at given points.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(short = 'n', default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset whose points are evaluated instead of fresh samples.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>, target: Option<&str>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| io::IoError::Fs {
                path: p.clone(),
                source,
            })?;
            RunConfig::parse_with(&text, target)?
        }
        None => {
            let t = target.ok_or_else(|| ConfigError::Missing("problem".into()))?;
            RunConfig::defaults(t)?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Executes a parsed command.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            truth,
            n,
            seed,
            out,
            with_logp,
        } => commands::gen_data(&truth, n, seed, &out, with_logp),
        Command::TrainDensity {
            config,
            truth,
            out,
            seed,
            checkpoint,
        } => {
            let cfg = load_config(config.as_ref(), truth.as_deref(), seed)?;
            if !cfg.is_density() {
                return Err(CliError::Mismatch(format!("{} is a PDE benchmark; use solve-pde", cfg.target)));
            }
            commands::train_density_run(&cfg, &out, checkpoint.as_deref())
        }
        Command::SolvePde {
            config,
            problem,
            out,
            seed,
            checkpoint,
        } => {
            let cfg = load_config(config.as_ref(), problem.as_deref(), seed)?;
            if cfg.is_density() {
                return Err(CliError::Mismatch(format!(
                    "{} is a density benchmark; use train-density",
                    cfg.target
                )));
            }
            commands::solve_pde_run(&cfg, &out, checkpoint.as_deref())
        }
        Command::Sample {
            checkpoint,
            n,
            seed,
            out,
            unknown,
        } => {
            if unknown == 0 {
                return Err(CliError::Mismatch("unknowns are counted from 1".into()));
            }
            commands::sample_run(&checkpoint, n, seed, &out, unknown - 1)
        }
        Command::Eval {
            checkpoint,
            out,
            n,
            seed,
            data,
        } => {
            for (k, v) in commands::eval_run(&checkpoint, &out, n, seed, data.as_ref())? {
                println!("{k} = {v:.6e}");
            }
            Ok(())
        }
    }
}

/// Parses `args` and runs the command, returning the exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
