use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use nrdf_cli::commands::{self, to_bits};
use nrdf_cli::config::{LogBase, Overrides, RunConfig};
use nrdf_cli::CliError;

#[derive(Parser)]
#[command(
    name = "nrdf",
    version,
    about = "NRDF solver for finite-alphabet Markov sources"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for the backward pass
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the grid resolution N for every stage
    #[arg(long = "grid-levels")]
    grid_levels: Option<usize>,
    /// Override the price s for every stage
    #[arg(long, allow_hyphen_values = true)]
    s: Option<f64>,
    /// Override the horizon n
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Backward pass, then forward pass
    Solve(Common),
    /// Backward pass only; writes the checkpoint
    Backward(Common),
    /// Forward pass from a checkpoint
    Forward {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `backward` or `solve`
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One solve per price s
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated prices; defaults to `sweep_s` in the config
        #[arg(long = "s-list", value_delimiter = ',', allow_hyphen_values = true)]
        s_list: Option<Vec<f64>>,
    },
    /// Time the backward pass for several worker counts
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated worker counts; defaults to `bench_workers` in the config
        #[arg(long = "bench-workers", value_delimiter = ',')]
        bench_workers: Option<Vec<usize>>,
    },
    /// Single-stage solve without look-ahead
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Comma-separated source law; defaults to the configured initial law
        #[arg(long, value_delimiter = ',')]
        pred: Option<Vec<f64>>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply(&Overrides {
        horizon: common.horizon,
        grid_levels: common.grid_levels,
        s: common.s,
        workers: common.workers,
        out_dir: common.out.clone(),
    });
    Ok(cfg)
}

fn rate(base: LogBase, nats: f64) -> String {
    match base {
        LogBase::Nats => format!("{nats:.6} nats"),
        LogBase::Bits => format!("{:.6} bits", to_bits(nats)),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(common) => {
            let cfg = load(&common)?;
            let report = commands::cmd_solve(&cfg)?;
            let t = &report.solution.trajectory;
            println!(
                "average rate {}, average distortion {:.6}",
                rate(cfg.log_base, t.total_avg),
                t.average_distortion
            );
            for f in &report.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Backward(common) => {
            let cfg = load(&common)?;
            let (tables, path) = commands::cmd_backward(&cfg)?;
            println!(
                "{} cells, checksum {}",
                tables.total_cells(),
                tables.checksum()
            );
            println!("wrote {}", path.display());
        }
        Command::Forward { common, checkpoint } => {
            let cfg = load(&common)?;
            let t = commands::cmd_forward(&cfg, &checkpoint)?;
            println!(
                "average rate {}, average distortion {:.6}",
                rate(cfg.log_base, t.total_avg),
                t.average_distortion
            );
        }
        Command::Sweep { common, s_list } => {
            let cfg = load(&common)?;
            let list = s_list
                .or_else(|| cfg.sweep_s.clone())
                .ok_or_else(|| CliError::Validation("sweep needs --s-list or sweep_s".into()))?;
            let report = commands::cmd_sweep(&cfg, &list)?;
            for r in &report.rows {
                println!(
                    "s = {:<6} distortion {:.6} rate {} {}",
                    r.s,
                    r.avg_distortion,
                    rate(cfg.log_base, r.avg_rate_nats),
                    r.status
                );
            }
            println!("rate non-increasing in distortion: {}", report.monotone);
        }
        Command::Bench {
            common,
            bench_workers,
        } => {
            let cfg = load(&common)?;
            let workers = bench_workers
                .or_else(|| cfg.bench_workers.clone())
                .unwrap_or_else(|| vec![1]);
            for r in commands::cmd_bench(&cfg, &workers)? {
                println!(
                    "{:>3} workers: {:.3} s, {:.0} cells/s",
                    r.workers,
                    r.wall_seconds,
                    r.cells_per_sec()
                );
            }
        }
        Command::Oracle { common, pred } => {
            let cfg = load(&common)?;
            let r = commands::cmd_oracle(&cfg, pred.as_deref())?;
            println!(
                "rate {:.6} nats ({:.6} bits), distortion {:.6}",
                r.rate_nats, r.rate_bits, r.distortion
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
