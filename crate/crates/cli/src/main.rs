use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sepsis_cli::{commands, serve, CliError, CliResult, ExperimentConfig};

/// Synthetic sepsis cohort, physiology-informed encoders and distributional
/// RL ensembles. Log verbosity follows `RUST_LOG` (default `info`).
#[derive(Parser)]
#[command(name = "sepsis", version)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that holds every artifact of the run.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and the train/held-out split.
    Simulate,
    /// Train the physiology-informed recurrent autoencoder.
    TrainPhysioAe,
    /// Train the two-stage lab autoencoder.
    TrainLabAe,
    /// Fit the state scaler and the behavior-cloning network.
    TrainBc,
    /// Train a single C51 network on the whole training set.
    TrainRl,
    /// Train the bootstrap ensemble of C51 networks.
    TrainEnsemble,
    /// Write value distributions, vaso curves, heat-maps, uncertainty and recommendations.
    Evaluate,
    /// Within-patient permutation importance of every state feature.
    Importance,
    /// Serve the held-out cohort and models over HTTP.
    Serve {
        /// Overrides `serve.port`.
        #[arg(long)]
        port: Option<u16>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let root = cli.out.as_path();
    std::fs::create_dir_all(root)?;
    let manifest = match cli.command {
        Command::Simulate => commands::simulate(&config, root)?,
        Command::TrainPhysioAe => commands::train_physio_ae(&config, root)?,
        Command::TrainLabAe => commands::train_lab_ae(&config, root)?,
        Command::TrainBc => commands::train_bc(&config, root)?,
        Command::TrainRl => commands::train_rl(&config, root)?,
        Command::TrainEnsemble => commands::train_ensemble_cmd(&config, root)?,
        Command::Evaluate => commands::evaluate(&config, root)?,
        Command::Importance => commands::importance(&config, root)?,
        Command::Serve { port } => {
            if let Some(port) = port {
                config.serve.port = port;
            }
            return serve::run(&config, root);
        }
    };
    manifest.write(root)?;
    log::info!(
        "{} done; manifest at {}",
        manifest.command,
        root.join("manifests").join(format!("{}.json", manifest.command)).display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    let json = serde_json::to_string(&e.report()).unwrap_or_else(|_| e.to_string());
    eprintln!("{json}");
    ExitCode::from(e.exit_code())
}
