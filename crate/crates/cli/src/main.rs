//! Command-line driver for the adversarial-patch attack and purification
//! defense pipeline. Every subcommand reads one TOML experiment config and
//! works inside a run directory keyed by the config's content hash.

use clap::{Parser, Subcommand};
use patchpure::commands::{self, Ctx};
use patchpure::config::load_config;
use patchpure::rundir::RunDir;
use patchpure::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "patchpure",
    version,
    about = "Adversarial patch attacks on image classifiers and a GAN purification defense"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (default: runs/<config-hash>).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Override the seed of the stage being run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, adapt, split, and pin the dataset.
    PrepareData,
    /// Train a configured classifier backbone (default: the main one).
    TrainClassifier {
        #[arg(long)]
        backbone: Option<String>,
    },
    /// Optimize one adversarial patch per configured size.
    GenPatch {
        /// Comma-separated override of attack.patch_sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Train the purifier GAN and select the SSIM-gated checkpoint.
    TrainDefense,
    /// Produce the accuracy/timing/transfer reports and plots.
    Evaluate {
        /// Exit 3 unless the configured thresholds hold.
        #[arg(long)]
        check: bool,
        /// Pass patched images through unchanged (paired control).
        #[arg(long)]
        identity_generator: bool,
    },
    /// Run images through the trained generator.
    Purify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Route a `--seed` override to the seed the subcommand actually consumes.
fn apply_seed_override(cfg: &mut patchpure::config::ExperimentConfig, cmd: &Command, seed: u64) {
    match cmd {
        Command::PrepareData => cfg.dataset.split_seed = seed,
        Command::TrainClassifier { .. } => cfg.classifier.seed = seed,
        Command::GenPatch { .. } => cfg.attack.seed = seed,
        Command::TrainDefense => cfg.defense.seed = seed,
        Command::Evaluate { .. } => cfg.eval.seed = seed,
        Command::Purify { .. } => {}
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = cli.config.ok_or_else(|| {
        CliError::Validation("--config is required (see configs/ for profiles)".to_string())
    })?;
    let mut cfg = load_config(&config_path)?;
    if let Some(seed) = cli.seed {
        apply_seed_override(&mut cfg, &cli.command, seed);
    }
    let run = RunDir::for_config(&cfg, cli.run_dir);
    let _lock = run.lock()?;
    println!("run directory: {}", run.root().display());
    let ctx = Ctx { cfg, run };
    match cli.command {
        Command::PrepareData => commands::prepare_data(&ctx),
        Command::TrainClassifier { backbone } => {
            commands::train_classifier_cmd(&ctx, backbone.as_deref())
        }
        Command::GenPatch { sizes } => commands::gen_patch(&ctx, sizes),
        Command::TrainDefense => commands::train_defense(&ctx),
        Command::Evaluate { check, identity_generator } => {
            commands::evaluate(&ctx, check, identity_generator)
        }
        Command::Purify { input, output } => commands::purify(&ctx, &input, &output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
