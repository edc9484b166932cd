mod commands;
mod config;
mod runner;

use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

/// Multi-task multi-scale 3D W-net: phantom data, training, experiment grids
/// and Grad-CAM export. Thread count comes from WNET_THREADS (default 1).
#[derive(Parser)]
#[command(name = "wnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset (V3D volumes + manifest).
    GenerateData {
        /// Output dataset directory.
        #[arg(long)]
        out: String,
        /// Cubic side length or DxHxW (each divisible by 16).
        #[arg(long, default_value = "32")]
        dims: String,
        /// Samples per pathology class.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Intensity added to the peritumoral shell of outcome-1 samples.
        #[arg(long, default_value_t = 0.15)]
        peritumoral_effect: f32,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the dataset directory from the config.
        #[arg(long)]
        data: Option<String>,
        /// Override the output directory from the config.
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on one split, printing the table metrics.
    Eval {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Run the 15-row task/feature grid of experiment 1.
    Ablate {
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: String,
        #[arg(long, default_value = "experiment1")]
        grid: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        base_channels: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Sweep the prediction weight lambda over the full four-task model.
    SweepLambda {
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: String,
        /// Comma-separated lambda values.
        #[arg(long, default_value = "0.1,0.3,0.5,0.7,0.9")]
        values: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        /// Shrink alpha to (1 - lambda) / 2 when a lambda would push the
        /// classification weight negative.
        #[arg(long)]
        auto_alpha: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        base_channels: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Export Grad-CAM heatmaps for one sample at the chosen taps.
    Gradcam {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: String,
        #[arg(long)]
        sample: String,
        /// Comma-separated tap ids (enc1..enc5, dec1..dec4).
        #[arg(long, default_value = "enc5")]
        tap: String,
        /// class | outcome | seg-sum.
        #[arg(long, default_value = "outcome")]
        target: String,
        #[arg(long)]
        out: String,
        /// Also write the map upsampled to input resolution.
        #[arg(long)]
        upsample: bool,
        #[arg(long)]
        force: bool,
    },
    /// Re-execute a run from the manifest it wrote.
    Replay {
        manifest: PathBuf,
    },
}

fn build_config(command: &Command) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    match command {
        Command::GenerateData {
            out,
            dims,
            n,
            seed,
            peritumoral_effect,
            force,
        } => {
            cfg.command = "generate-data".into();
            cfg.out_dir = out.clone();
            cfg.dims = config::parse_dims(dims)?;
            cfg.n_per_class = *n;
            cfg.seed = *seed;
            cfg.peritumoral_effect = *peritumoral_effect;
            cfg.force = *force;
        }
        Command::Train {
            config,
            data,
            out,
            force,
        } => {
            cfg.command = "train".into();
            cfg.apply_file(config)?;
            cfg.command = "train".into();
            if let Some(d) = data {
                cfg.data_dir = d.clone();
            }
            if let Some(o) = out {
                cfg.out_dir = o.clone();
            }
            cfg.force |= *force;
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            cfg.command = "eval".into();
            cfg.checkpoint = checkpoint.clone();
            cfg.data_dir = data.clone();
            cfg.split = split.clone();
        }
        Command::Ablate {
            data,
            out,
            grid,
            seeds,
            seed,
            alpha,
            lambda,
            epochs,
            patience,
            batch,
            lr,
            base_channels,
            force,
        } => {
            if grid != "experiment1" {
                anyhow::bail!("unknown grid '{grid}'; available: experiment1");
            }
            cfg.command = "ablate".into();
            cfg.data_dir = data.clone();
            cfg.out_dir = out.clone();
            cfg.seeds = *seeds;
            cfg.seed = *seed;
            cfg.alpha = *alpha;
            cfg.lambda = *lambda;
            apply_schedule(&mut cfg, epochs, patience, batch, lr, base_channels);
            cfg.force = *force;
        }
        Command::SweepLambda {
            data,
            out,
            values,
            seeds,
            seed,
            alpha,
            auto_alpha,
            epochs,
            patience,
            batch,
            lr,
            base_channels,
            force,
        } => {
            cfg.command = "sweep-lambda".into();
            cfg.data_dir = data.clone();
            cfg.out_dir = out.clone();
            cfg.lambdas = values
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse::<f64>().map_err(anyhow::Error::from))
                .collect::<anyhow::Result<Vec<_>>>()?;
            cfg.seeds = *seeds;
            cfg.seed = *seed;
            cfg.alpha = *alpha;
            cfg.auto_alpha = *auto_alpha;
            apply_schedule(&mut cfg, epochs, patience, batch, lr, base_channels);
            cfg.force = *force;
        }
        Command::Gradcam {
            checkpoint,
            data,
            sample,
            tap,
            target,
            out,
            upsample,
            force,
        } => {
            cfg.command = "gradcam".into();
            cfg.checkpoint = checkpoint.clone();
            cfg.data_dir = data.clone();
            cfg.sample = sample.clone();
            cfg.taps = tap
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| wnet_core::model::Tap::parse(s.trim()).map_err(anyhow::Error::from))
                .collect::<anyhow::Result<Vec<_>>>()?;
            cfg.target = target.clone();
            cfg.out_dir = out.clone();
            cfg.upsample = *upsample;
            cfg.force = *force;
        }
        Command::Replay { .. } => unreachable!("replay handled separately"),
    }
    Ok(cfg)
}

fn apply_schedule(
    cfg: &mut RunConfig,
    epochs: &Option<usize>,
    patience: &Option<usize>,
    batch: &Option<usize>,
    lr: &Option<f64>,
    base_channels: &Option<usize>,
) {
    if let Some(e) = epochs {
        cfg.epochs = *e;
    }
    if let Some(p) = patience {
        cfg.patience = *p;
    }
    if let Some(b) = batch {
        cfg.batch_size = *b;
    }
    if let Some(l) = lr {
        cfg.learning_rate = *l;
    }
    if let Some(c) = base_channels {
        cfg.base_channels = *c;
    }
}

/// Errors a user can fix by changing arguments or configuration.
fn is_usage_error(err: &anyhow::Error) -> bool {
    use wnet_core::error::{ConfigError, TrainError};
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return true;
        }
        if let Some(TrainError::Config(_)) = cause.downcast_ref::<TrainError>() {
            return true;
        }
    }
    let text = err.to_string();
    text.contains("needs ") || text.contains("unknown ") || text.contains("not empty")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with success status
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    wnet_core::par::init_threads_from_env();

    let result = match &cli.command {
        Command::Replay { manifest } => commands::replay(manifest),
        other => build_config(other).and_then(|cfg| match other {
            Command::GenerateData { .. } => commands::generate_data(&cfg),
            Command::Train { .. } => commands::train(&cfg),
            Command::Eval { .. } => commands::eval(&cfg),
            Command::Ablate { .. } => commands::ablate(&cfg),
            Command::SweepLambda { .. } => commands::sweep_lambda(&cfg),
            Command::Gradcam { .. } => commands::gradcam(&cfg),
            Command::Replay { .. } => unreachable!(),
        }),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
