//! `fedridge`: partition data into a client stream, run federations in
//! process or over TCP, verify the aggregate against pooled training, and
//! benchmark the cost model.
//!
//! Log level comes from `FEDRIDGE_LOG` (default `warn`).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{SynthArgs, VerifyArgs};
use config::{Mode, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "fedridge", version, about = "Exact federated class-incremental ridge learning")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write Gaussian-blob train and test bundles.
    Synth {
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 6.0)]
        scale: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split a training bundle into a task-major stream of virtual clients.
    Partition(Overrides),
    /// Run the configured federation.
    Run {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check the aggregate against pooled ridge training on random data.
    Verify {
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 5)]
        clients: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        min_samples: usize,
        #[arg(long, default_value_t = 40)]
        max_samples: usize,
        #[arg(long, default_value_t = 5)]
        permutations: usize,
        #[arg(long, default_value_t = 2)]
        regroupings: usize,
        /// Perturb one upload; the pooled-equivalence check must fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Time local training and aggregation and fit growth exponents.
    Bench {
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = [64, 256, 1024])]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1_000, 10_000])]
        samples: Vec<usize>,
        /// Classes per client.
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Aggregate uploads from TCP clients, then write the model.
    Serve(Overrides),
    /// Send one or more clients to a running server.
    Join(Overrides),
}

fn configured(path: Option<&std::path::Path>, overrides: &Overrides, mode: Option<Mode>) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    config.apply(overrides);
    if let Some(mode) = mode {
        config.mode = mode;
    }
    Ok(config)
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    let path = cli.config.as_deref();
    match cli.command {
        Command::Synth { output, classes, per_class, test_per_class, width, scale, noise, seed } => {
            commands::synth(&SynthArgs { output, classes, per_class, test_per_class, width, scale, noise, seed })?
        }
        Command::Partition(o) => commands::partition(&configured(path, &o, None)?)?,
        Command::Run { mode, overrides } => commands::run(&configured(path, &overrides, mode)?)?,
        Command::Serve(o) => commands::run(&configured(path, &o, Some(Mode::Serve))?)?,
        Command::Join(o) => commands::run(&configured(path, &o, Some(Mode::Join))?)?,
        Command::Verify {
            gamma,
            seed,
            clients,
            width,
            classes,
            min_samples,
            max_samples,
            permutations,
            regroupings,
            corrupt,
        } => {
            let args =
                VerifyArgs { clients, width, classes, min_samples, max_samples, permutations, regroupings, corrupt };
            let overrides = Overrides { gamma, seed, ..Overrides::default() };
            if !commands::verify(&configured(path, &overrides, None)?, &args)? {
                log::error!("verification failed");
                return Ok(fedridge::exit::NUMERICAL);
            }
        }
        Command::Bench { gamma, seed, widths, samples, classes, repeats } => {
            let overrides = Overrides { gamma, seed, ..Overrides::default() };
            commands::bench(&configured(path, &overrides, None)?, widths, samples, classes, repeats)?
        }
    }
    Ok(fedridge::exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDRIDGE_LOG", "warn")).init();
    let code = match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.downcast_ref::<fedridge::Error>().map_or(fedridge::exit::VALIDATION, fedridge::Error::exit_code)
        }
    };
    ExitCode::from(code as u8)
}
