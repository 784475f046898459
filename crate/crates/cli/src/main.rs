use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gtsnt_cli::commands;

/// Train, evaluate and benchmark the spiking-tokenizer graph transformer.
///
/// Exit codes: 0 success, 1 runtime failure, 2 usage error,
/// 3 gradient check failed.
#[derive(Parser)]
#[command(name = "gtsnt", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a TOML config.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Write the best-validation checkpoint here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-epoch metrics CSV here.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Override [train].seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint produced by `train --out`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Report per-layer codebook statistics as JSON.
    Tokenize {
        #[arg(long)]
        config: PathBuf,
        /// Use trained parameters instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Measure forward latency and estimate operation counts and energy.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time the factored attention against the dense reference across
    /// growing node counts and fit log-log slopes.
    Scale {
        #[arg(long)]
        config: PathBuf,
        /// Also write the timed points as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences on small
    /// synthetic graphs; exits 3 on failure.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Number of independently seeded graphs.
        #[arg(long, default_value_t = 5)]
        graphs: usize,
        /// Random parameter coordinates probed per graph.
        #[arg(long, default_value_t = 60)]
        probes: usize,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let value = match &cli.command {
        Command::Train {
            config,
            out,
            history,
            seed,
        } => commands::run_train(config, out.as_deref(), history.as_deref(), *seed)?,
        Command::Eval { config, checkpoint } => commands::run_eval(config, checkpoint)?,
        Command::Tokenize { config, checkpoint } => {
            commands::run_tokenize(config, checkpoint.as_deref())?
        }
        Command::Bench { config, checkpoint } => {
            commands::run_bench(config, checkpoint.as_deref())?
        }
        Command::Scale { config, csv } => commands::run_scale(config, csv.as_deref())?,
        Command::Gradcheck {
            config,
            graphs,
            probes,
            tol,
        } => {
            let (value, passed) = commands::run_gradcheck(config, *graphs, *probes, *tol)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
            return Ok(if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            });
        }
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
