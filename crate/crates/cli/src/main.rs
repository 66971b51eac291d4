//! `cnd`: one binary orchestrating the whole pipeline — synthetic corpus
//! generation, contrastive encoder pretraining, latent-diffusion training,
//! condition-module fine-tuning, generation, evaluation, and linear decoding
//! analysis. Each invocation owns one run directory with the resolved config,
//! artifacts, metrics files, and checkpoint content hashes.

mod config;
mod stages;

use clap::{Parser, Subcommand};
use stages::StageCmd;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cnd", version, about = "Brain-to-image decoding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file; defaults apply for absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Exact run directory (otherwise <root>/<subcommand>-<unix-time> under
    /// $CND_RUN_ROOT or ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set contrastive.alpha_c=1.0
    /// (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic fMRI/image corpus.
    GenData,
    /// Phase 1: contrastive masked-autoencoder pretraining.
    Pretrain,
    /// Train the image autoencoder and the class-conditional denoiser.
    TrainDiffusion,
    /// Phase 2: fine-tune the condition module against the frozen denoiser.
    Finetune,
    /// Sample images for every held-out fMRI vector.
    Generate,
    /// n-way identification accuracy of the generated images.
    Evaluate,
    /// Voxel-to-activation regressions and weight maps.
    Analyze,
    /// Run every stage in order in one run directory.
    All,
}

impl Command {
    fn stage(self) -> StageCmd {
        match self {
            Command::GenData => StageCmd::GenData,
            Command::Pretrain => StageCmd::Pretrain,
            Command::TrainDiffusion => StageCmd::TrainDiffusion,
            Command::Finetune => StageCmd::Finetune,
            Command::Generate => StageCmd::Generate,
            Command::Evaluate => StageCmd::Evaluate,
            Command::Analyze => StageCmd::Analyze,
            Command::All => StageCmd::All,
        }
    }
}

fn run_dir(out: &Option<PathBuf>, stage: StageCmd) -> PathBuf {
    if let Some(dir) = out {
        return dir.clone();
    }
    let root = std::env::var_os("CND_RUN_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    root.join(format!("{}-{stamp}", stage.name()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Config problems (unknown keys, bad overrides) are usage errors: exit 2
    // before any run directory exists.
    let cfg = match config::resolve(cli.config.as_deref(), cli.seed, &cli.sets) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let stage = cli.command.stage();
    let dir = run_dir(&cli.out, stage);
    match stages::execute(stage, cfg, dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
