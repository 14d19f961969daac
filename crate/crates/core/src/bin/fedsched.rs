use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsched::analysis::{self, BoundParams};
use fedsched::cli;
use fedsched::Error;

#[derive(Parser)]
#[command(name = "fedsched", version, about = "Federated learning-rate scheduler simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write per-round metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Overrides the `workers` key.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Sweep initial global and local learning rates for several variants.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Evaluate the convergence bound.
    Bound {
        #[arg(long, default_value_t = 3.0)]
        gamma_alpha: f64,
        #[arg(long, default_value_t = 10.0)]
        gamma_beta: f64,
        #[arg(long, required_unless_present = "sigma_from")]
        sigma_sq: Option<f64>,
        /// Estimate σ² from this run config instead of passing it.
        #[arg(long, conflicts_with = "sigma_sq")]
        sigma_from: Option<PathBuf>,
        /// Probe batches per client for the estimate.
        #[arg(long, default_value_t = 32)]
        probes: usize,
        #[arg(long)]
        rho_sq: f64,
        /// Number of clients M.
        #[arg(long)]
        clients: usize,
        /// Local steps k.
        #[arg(long)]
        local_steps: usize,
        /// Rounds T.
        #[arg(long)]
        rounds: usize,
        /// Comma-separated list of T values; prints one row each.
        #[arg(long, value_delimiter = ',')]
        t_sweep: Option<Vec<usize>>,
    },
    /// Write the generated training split as text.
    Data {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Run {
            config,
            output,
            workers,
        } => cli::cmd_run(&config, &output, workers).map(|(cfg, summary)| {
            println!("{}", summary.one_line(&cfg));
        }),
        Command::Grid { config, output_dir } => cli::cmd_grid(&config, &output_dir).map(|(result, files)| {
            for f in files {
                println!("{}", f.display());
            }
            if !result.failures.is_empty() {
                eprintln!("{} runs diverged; see failures.csv", result.failures.len());
            }
        }),
        Command::Bound {
            gamma_alpha,
            gamma_beta,
            sigma_sq,
            sigma_from,
            probes,
            rho_sq,
            clients,
            local_steps,
            rounds,
            t_sweep,
        } => match sigma_from {
            Some(path) => cli::load_config(&path)
                .and_then(|c| analysis::estimate_sigma_sq(&c.experiment, probes))
                .inspect(|s| eprintln!("estimated sigma_sq={s}")),
            None => Ok(sigma_sq.expect("required by clap")),
        }
        .and_then(|sigma_sq| BoundParams::new(gamma_alpha, gamma_beta, sigma_sq, rho_sq, clients, local_steps, rounds))
        .and_then(|p| cli::cmd_bound(&p, t_sweep.as_deref()))
        .map(|text| print!("{text}")),
        Command::Data { config, output } => cli::cmd_data(&config, &output).map(|n| println!("{n} rows")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged {
                last_finite: Some(r), ..
            } = &e
            {
                eprintln!("last finite round: {}", r.round);
            }
            ExitCode::FAILURE
        }
    }
}
