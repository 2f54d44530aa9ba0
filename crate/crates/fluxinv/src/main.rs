use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fluxinv::config::CONFIG_SCHEMA_VERSION;
use fluxinv::run;

/// Bayesian trace-gas flux inversion: simulate experiments, invert them,
/// and score the results.
#[derive(Parser)]
#[command(name = "fluxinv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-simulate an experiment into `<output>/truth/`.
    #[command(after_help = schema_help())]
    Simulate {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override the `seed` key in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the Gibbs sampler and write posterior samples into
    /// `<output>/posterior/`.
    #[command(after_help = schema_help())]
    Infer {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Override the `seed` key in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a posterior directory against a truth directory.
    Diagnose {
        /// Truth directory written by `simulate`.
        #[arg(long)]
        truth: PathBuf,
        /// Posterior directory written by `infer`.
        #[arg(long)]
        samples: PathBuf,
        /// Region-mask CSV for flux aggregation.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Scores CSV destination (default: `<samples>/scores.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the one-dimensional cumulant demonstration slices as CSV.
    CumulantsDemo {
        /// Number of grid cells over the demonstration domain.
        #[arg(long, default_value_t = 100)]
        grid_n: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn schema_help() -> String {
    format!(
        "Config schema version {CONFIG_SCHEMA_VERSION}. Sections: [run] [grid] [stations] \
         [sensitivities] [truth] [discrepancy] [observations] [inventory] [inputs] [mcmc] \
         [priors]. Unknown keys are errors; see the README for the full key list. \
         FLUXINV_THREADS caps chain parallelism."
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, seed } => run::cmd_simulate(&config, seed),
        Command::Infer { config, seed } => run::cmd_infer(&config, seed),
        Command::Diagnose {
            truth,
            samples,
            masks,
            out,
        } => run::cmd_diagnose(&truth, &samples, masks.as_deref(), out.as_deref()).map(|_| ()),
        Command::CumulantsDemo { grid_n, out } => run::cmd_cumulants_demo(grid_n, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
