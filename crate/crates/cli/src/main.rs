use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metrosynth_cli::{cmd_bounds, cmd_evaluate, cmd_precision_bin, cmd_train, configure_threads, CliResult};

#[derive(Parser)]
#[command(name = "metrosynth", version, about = "Train and evaluate measurement strategies for simulated quantum sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the agent described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run evaluation episodes and write per-step CSVs.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Average (resource, loss) points over bins of width delta.
    PrecisionBin {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Tabulate the DC magnetometry lower bound.
    Bounds {
        /// measurement_limited or time_limited
        #[arg(long)]
        regime: String,
        #[arg(long)]
        t2_star: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        start: f64,
        #[arg(long, default_value_t = 20.0)]
        end: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Evaluate {
            config,
            checkpoint,
            episodes,
            seed,
            out,
        } => cmd_evaluate(&config, checkpoint.as_deref(), episodes, seed, &out),
        Command::PrecisionBin { points, delta, out } => cmd_precision_bin(&points, delta, &out),
        Command::Bounds {
            regime,
            t2_star,
            start,
            end,
            step,
            out,
        } => cmd_bounds(&regime, t2_star, start, end, step, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
