use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use shiftlab_core::dataset::{self, load_split, Split};
use shiftlab_core::eval::{evaluate, EvalOptions};
use shiftlab_core::hsic::PenaltyVariant;
use shiftlab_core::model::load_checkpoint;
use shiftlab_core::train::{run_sweep, train_loop, GridSpec, RunStatus, TrainConfig};
use shiftlab_core::{plot, Error};

#[derive(Parser)]
#[command(name = "shiftlab", version, about = "Colored-MNIST domain-shift experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the four colored splits and the palette from raw MNIST.
    GenData {
        #[arg(long)]
        mnist_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = dataset::DEFAULT_COLOR_DIM)]
        d: usize,
        #[arg(long, default_value_t = dataset::DEFAULT_PER_CLASS_TRAIN)]
        per_class_train: usize,
        #[arg(long, default_value_t = dataset::DEFAULT_PER_CLASS_EVAL)]
        per_class_eval: usize,
    },
    /// Train one model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Split,
        /// Directory holding the generated split files.
        #[arg(long)]
        data_dir: PathBuf,
        /// Penalty reported alongside accuracy.
        #[arg(long, default_value = "czy")]
        variant: String,
        #[arg(long, default_value_t = 150)]
        batch_size: usize,
    },
    /// Train every cell of a grid and write a manifest.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Render training curves from one or more metrics CSVs.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Input(anyhow::Error),
    Divergence(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => Failure::Divergence(e.into()),
            other => Failure::Input(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Divergence { .. }) => Failure::Divergence(e),
            _ => Failure::Input(e),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            mnist_dir,
            out_dir,
            seed,
            d,
            per_class_train,
            per_class_eval,
        } => {
            let (palette, splits) = dataset::generate(&mnist_dir, seed, d, per_class_train, per_class_eval)
                .with_context(|| format!("generating splits from {}", mnist_dir.display()))?;
            splits.save_dir(&out_dir)?;
            palette.save_json(out_dir.join("palette.json"))?;
            for ds in splits.iter() {
                eprintln!("{}: {} images", ds.split, ds.len());
            }
        }
        Command::Train { config } => {
            let config = TrainConfig::load(&config)?;
            let outcome = train_loop(&config)?;
            eprintln!(
                "wrote {} and {} checkpoints",
                outcome.metrics_path.display(),
                outcome.checkpoints.len()
            );
        }
        Command::Eval {
            checkpoint,
            split,
            data_dir,
            variant,
            batch_size,
        } => {
            let variant = match variant.as_str() {
                "czy" => Some(PenaltyVariant::Czy),
                "cz" => Some(PenaltyVariant::Cz),
                "none" => None,
                other => return Err(Failure::Input(anyhow::anyhow!("unknown variant {other:?}"))),
            };
            let params = load_checkpoint(&checkpoint)?;
            let ds = load_split(data_dir.join(split.file_name()))?;
            let opts = EvalOptions {
                variant,
                batch_size,
                ..EvalOptions::default()
            };
            let mut report = evaluate(&params, &ds, &opts)?;
            report.checkpoint = Some(checkpoint.display().to_string());
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Sweep { grid } => {
            let spec = GridSpec::load(&grid)?;
            let runs = run_sweep(&spec)?;
            let failed: Vec<_> = runs.iter().filter(|r| r.status == RunStatus::Failed).collect();
            for r in &failed {
                eprintln!("{}: {}", r.name, r.error.as_deref().unwrap_or("failed"));
            }
            eprintln!("{} of {} cells ok", runs.len() - failed.len(), runs.len());
            if failed.iter().any(|r| r.diverged) {
                return Err(Failure::Divergence(anyhow::anyhow!("at least one cell diverged")));
            }
            if !failed.is_empty() {
                return Err(Failure::Input(anyhow::anyhow!("{} cells failed", failed.len())));
            }
        }
        Command::Plot { metrics, out } => plot::plot_files(&metrics, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Divergence(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
