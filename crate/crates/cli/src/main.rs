//! `dseg`: train a small diffusion model on procedurally generated shape
//! scenes, extract pixel-level representations from its decoder
//! activations and segment with a few labeled images.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::SplitChoice;
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dseg",
    version,
    about = "Few-shot semantic segmentation from diffusion-model activations"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override a config field by dotted path, e.g. --set training.steps=200
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for fan-out stages (ensemble members)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the shapes dataset and write it to disk
    GenData,
    /// Train the diffusion model on the unlabeled pool
    TrainDdpm {
        /// Continue from the saved checkpoint and optimizer state
        #[arg(long)]
        resume: bool,
    },
    /// Extract and persist feature volumes for the labeled split
    Extract {
        /// Which split to featurize: train, test or all
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train the MLP ensemble from persisted features
    TrainSeg,
    /// Predict masks for image files (PNG in, mask + overlay out)
    Segment {
        /// Image paths
        images: Vec<PathBuf>,
    },
    /// Evaluate the ensemble on the test split
    Evaluate,
    /// Probe grid over (decoder block, timestep), plus area-stratified grids
    Probe,
    /// Cluster per-pixel features with k-means and render cluster masks
    Kmeans,
    /// Compare the three noise policies
    AblateNoise,
    /// mIoU as a function of the labeled budget
    SweepLabels,
    /// mIoU under test-image corruptions of increasing severity
    Robustness,
}

fn run(cli: Cli) -> dseg_core::Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(w) = cli.workers {
        overrides.push(format!("experiment.workers={w}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenData => commands::cmd_gen_data(&config),
        Command::TrainDdpm { resume } => commands::cmd_train_ddpm(&config, resume).map(|_| ()),
        Command::Extract { split } => {
            let choice: SplitChoice = split.parse()?;
            commands::cmd_extract(&config, choice)
        }
        Command::TrainSeg => commands::cmd_train_seg(&config),
        Command::Segment { images } => commands::cmd_segment(&config, &images),
        Command::Evaluate => commands::cmd_evaluate(&config).map(|_| ()),
        Command::Probe => commands::cmd_probe(&config),
        Command::Kmeans => commands::cmd_kmeans(&config),
        Command::AblateNoise => commands::cmd_ablate_noise(&config),
        Command::SweepLabels => commands::cmd_sweep_labels(&config),
        Command::Robustness => commands::cmd_robustness(&config),
    }
}

fn main() -> ExitCode {
    // clap exits with code 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
