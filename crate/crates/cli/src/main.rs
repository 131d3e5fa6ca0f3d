use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fedmix::Error;
use fedmix_cli::{load_config, run_experiment, run_sweep};

/// Federated averaging followed by per-client specialist and mixture training.
#[derive(Parser, Debug)]
#[command(name = "fedmix", version)]
struct Cli {
    /// TOML config laid over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "fedmix-out")]
    out: PathBuf,
    /// Base configuration: desk or smoke.
    #[arg(long)]
    preset: Option<String>,
    /// Runs the FedAvg learning-rate sweep instead of the experiment.
    #[arg(long)]
    sweep_lr: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = (|| {
        let mut cfg = load_config(cli.config.as_deref(), cli.preset.as_deref())?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if cli.sweep_lr {
            let lrs = cfg.sweep.learning_rates.clone();
            let rows = run_sweep(&cfg, &lrs, &cli.out)?;
            for r in rows.iter().filter(|r| r.best) {
                println!("best learning rate {} (validation accuracy {:.2}%)", r.learning_rate, r.validation_accuracy.unwrap_or(0.0));
            }
        } else {
            let out = run_experiment(&cfg, &cli.out)?;
            println!("{} records written to {}", out.records.len(), cli.out.join("results.csv").display());
        }
        Ok::<(), Error>(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
