use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use replaylab::Error;

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "replaylab", version, about = "Replay-suppression experiments on graph diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a diffusion graph and write it as JSON.
    GenGraph {
        #[arg(long, default_value_t = 50)]
        nodes: usize,
        #[arg(long, default_value_t = 0.12)]
        branching: f64,
        #[arg(long, default_value_t = 0.2)]
        sens_frac: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every checkpoint a config needs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a config from existing checkpoints.
    RsdEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train, evaluate and report every method in a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// RAPO utility-safety sweep over w_H and the scar rate.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "w-h", value_delimiter = ',', required = true)]
        w_h: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        eta: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute the report of a finished run from its episode records.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the exact checks on small explicit instances.
    Verify {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenGraph {
            nodes,
            branching,
            sens_frac,
            seed,
            out,
        } => commands::gen_graph(nodes, branching, sens_frac, seed, &out),
        Command::Train { config, out, workers } => commands::train(&config, &out, workers),
        Command::RsdEval {
            config,
            checkpoints,
            runs_dir,
            workers,
        } => commands::rsd_eval(&config, &checkpoints, &runs_dir, workers),
        Command::Run {
            config,
            runs_dir,
            workers,
        } => commands::run(&config, &runs_dir, workers),
        Command::Sweep {
            config,
            w_h,
            eta,
            out,
            workers,
        } => commands::sweep(&config, &w_h, &eta, &out, workers),
        Command::Report { run, out } => commands::report(&run, out.as_deref()),
        Command::Verify { trials, seed } => commands::verify(trials, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::InvalidArgument(_)) => 2,
        _ => 3,
    }
}

/// Read and validate a config, applying the seed override from the environment.
pub(crate) fn load_config(path: &std::path::Path, workers: Option<usize>) -> anyhow::Result<replaylab::config::RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = replaylab::config::RunConfig::from_json(&text)?;
    cfg.apply_env_seed()?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}
