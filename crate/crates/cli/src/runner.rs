//! Shared helpers: dataset loading, one training run from a RunConfig, and
//! result formatting.

use crate::config::RunConfig;
use anyhow::{bail, Context, Result};
use std::path::Path;
use wnet_core::model::{ModelConfig, TaskConfig, WNet};
use wnet_core::phantom::{Sample, Split};
use wnet_core::train::{evaluate, train, EvalReport, TrainConfig, TrainLog};
use wnet_core::v3d;

pub fn load_dataset(data_dir: &str) -> Result<Vec<Sample>> {
    let samples = v3d::load_dataset(Path::new(data_dir))
        .with_context(|| format!("loading dataset from {data_dir}"))?;
    if samples.is_empty() {
        bail!("dataset at {data_dir} is empty");
    }
    Ok(samples)
}

pub fn split<'a>(samples: &'a [Sample], which: Split) -> Vec<&'a Sample> {
    samples.iter().filter(|s| s.split == which).collect()
}

pub fn parse_split(name: &str) -> Result<Split> {
    Split::parse(name).ok_or_else(|| anyhow::anyhow!("unknown split '{name}' (train|val|test)"))
}

pub struct RunOutcome {
    pub log: TrainLog,
    pub val: EvalReport,
    pub model: WNet<f32>,
}

/// Trains one model described by the config on an already-loaded dataset and
/// evaluates the retained best checkpoint on the validation split.
pub fn train_one(cfg: &RunConfig, samples: &[Sample], task: &TaskConfig, seed: u64) -> Result<RunOutcome> {
    let dims = samples[0].image.dims;
    let model_cfg = ModelConfig {
        base_channels: cfg.base_channels,
        input_dims: dims,
        seed,
        ..Default::default()
    };
    let mut model = WNet::<f32>::new(model_cfg, task.clone())?;
    let train_set = split(samples, Split::Train);
    let val_set = split(samples, Split::Val);
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        patience: cfg.patience,
        batch_size: cfg.batch_size,
        lr: cfg.learning_rate,
        seed,
    };
    let log = train(&mut model, &train_set, &val_set, &tcfg)?;
    let val = evaluate(&model, &val_set, cfg.batch_size)?;
    Ok(RunOutcome { log, val, model })
}

/// Formats an optional metric the way the paper's tables mark absent cells.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "/".into())
}

pub fn report_lines(split_name: &str, report: &EvalReport) -> String {
    format!(
        "split = {}\nn_samples = {}\nloss_glob = {:.6}\ndice_coef = {}\nclass_accuracy = {}\nclass_auc = {}\npred_accuracy = {}\npred_auc = {}\n",
        split_name,
        report.n_samples,
        report.loss_glob,
        cell(report.dice),
        cell(report.class_acc),
        cell(report.class_auc),
        cell(report.pred_acc),
        cell(report.pred_auc),
    )
}

/// Creates the output directory, refusing to reuse a non-empty one unless
/// forced.
pub fn prepare_out_dir(out_dir: &str, force: bool) -> Result<()> {
    let path = Path::new(out_dir);
    if path.exists() {
        let non_empty = std::fs::read_dir(path)
            .with_context(|| format!("reading {out_dir}"))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("output directory {out_dir} is not empty; pass --force to overwrite");
        }
    } else {
        std::fs::create_dir_all(path).with_context(|| format!("creating {out_dir}"))?;
    }
    Ok(())
}
