use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gmocp_core::oracle::{oracle_check, OracleName, OracleParams};
use gmocp_core::runner::{
    generate_stream_file, run_experiment, run_sweep, ExperimentConfig, GridAxis, ResultRow, RunOptions, StreamSpec,
    RESULTS_FILE, SUMMARY_FILE,
};

#[derive(Parser)]
#[command(name = "gmocp", version, about = "Multi-model online conformal prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config over all of its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Skip (config, seed) pairs already in the results file.
        #[arg(long)]
        resume: bool,
        /// Write a per-step trace CSV for every seed.
        #[arg(long)]
        trace: bool,
    },
    /// Run the product of a base config over grid axes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Axes such as `N=1,3,5 J=1,2,4` or `policy=gmocp,egmocp`.
        #[arg(long, num_args = 1.., required = true)]
        grid: Vec<String>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        trace: bool,
    },
    /// Cross-check a fast path against its brute-force reference.
    Oracle {
        /// quantile, alpha_bar, inclusion_prob, loss_unbiasedness or regret_grid.
        name: String,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        /// Monte-Carlo draws per instance.
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic stream to a CSV file.
    GenStream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn report(rows: &[ResultRow], cfg: &ExperimentConfig) {
    for r in rows {
        println!(
            "{} N={} J={} seed={} coverage={:.2} avg_width={:.3} single_width={:.2}",
            r.policy, r.n, r.j, r.seed, r.coverage, r.avg_width, r.single_width
        );
    }
    println!(
        "wrote {} and {}",
        cfg.output.join(RESULTS_FILE).display(),
        cfg.output.join(SUMMARY_FILE).display()
    );
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, resume, trace } => {
            let cfg = load(&config)?;
            let rows = run_experiment(&cfg, RunOptions { resume, trace })?;
            report(&rows, &cfg);
        }
        Command::Sweep {
            config,
            grid,
            resume,
            trace,
        } => {
            let cfg = load(&config)?;
            let axes = grid
                .iter()
                .map(|g| g.parse::<GridAxis>())
                .collect::<Result<Vec<_>, _>>()?;
            let rows = run_sweep(&cfg, &axes, RunOptions { resume, trace })?;
            report(&rows, &cfg);
        }
        Command::Oracle {
            name,
            instances,
            draws,
            seed,
        } => {
            let name: OracleName = name.parse()?;
            let r = oracle_check(name, &OracleParams { instances, draws, seed })?;
            println!("{r}");
            if !r.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::GenStream { config, out } => {
            let spec = StreamSpec::load(&config).with_context(|| format!("loading config {}", config.display()))?;
            let stream = spec.stream_config()?;
            generate_stream_file(&stream, &out)?;
            println!(
                "wrote {} steps x {} models to {}",
                stream.horizon,
                stream.n_models(),
                out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
