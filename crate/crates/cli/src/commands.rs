//! The six subcommands. Every command resolves a full `RunConfig`, executes,
//! and writes the resolved manifest next to its outputs so the run can be
//! replayed bit-for-bit with `wnet replay`.

use crate::config::RunConfig;
use crate::runner::{
    cell, load_dataset, parse_split, prepare_out_dir, report_lines, split, train_one,
};
use anyhow::{bail, Context, Result};
use std::path::Path;
use wnet_core::explain::{grad_cam, CamTarget};
use wnet_core::model::{LossWeights, Tap, TaskConfig};
use wnet_core::phantom::{generate, GenConfig, Split};
use wnet_core::{checkpoint, v3d};

pub fn generate_data(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(&cfg.out_dir, cfg.force)?;
    let gen = GenConfig {
        dims: cfg.dims,
        n_per_class: cfg.n_per_class,
        seed: cfg.seed,
        peritumoral_effect: cfg.peritumoral_effect,
        ..if cfg.dims.iter().all(|&d| d <= 16) {
            GenConfig::small16()
        } else {
            GenConfig::default()
        }
    };
    let samples = generate(&gen)?;
    let out = Path::new(&cfg.out_dir);
    v3d::save_dataset(out, &samples)?;
    cfg.write_manifest(out)?;
    let count = |sp: Split| samples.iter().filter(|s| s.split == sp).count();
    println!(
        "wrote {} samples to {} (train {} / val {} / test {})",
        samples.len(),
        cfg.out_dir,
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    if cfg.data_dir.is_empty() || cfg.out_dir.is_empty() {
        bail!("train needs data_dir and out_dir (config keys or flags)");
    }
    prepare_out_dir(&cfg.out_dir, cfg.force)?;
    let samples = load_dataset(&cfg.data_dir)?;
    let task = cfg.task_config();
    task.validate()?;
    let outcome = train_one(cfg, &samples, &task, cfg.seed)?;

    let out = Path::new(&cfg.out_dir);
    std::fs::write(out.join("trainlog.csv"), outcome.log.to_csv())?;
    std::fs::write(out.join("summary.txt"), outcome.log.summary())?;
    checkpoint::save(&outcome.model, &out.join("model.wnet"))?;
    cfg.write_manifest(out)?;
    println!("{}", outcome.log.summary());
    println!("{}", report_lines("val", &outcome.val));
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    if cfg.checkpoint.is_empty() || cfg.data_dir.is_empty() {
        bail!("eval needs --checkpoint and --data");
    }
    let model = checkpoint::load::<f32>(Path::new(&cfg.checkpoint))?;
    let samples = load_dataset(&cfg.data_dir)?;
    let dims = samples[0].image.dims;
    if dims != model.model.input_dims {
        bail!(
            "checkpoint expects input dims {:?} but the dataset provides {:?}",
            model.model.input_dims,
            dims
        );
    }
    let which = parse_split(&cfg.split)?;
    let subset = split(&samples, which);
    if subset.is_empty() {
        bail!("split '{}' is empty", cfg.split);
    }
    let report = wnet_core::train::evaluate(&model, &subset, cfg.batch_size)?;
    print!("{}", report_lines(&cfg.split, &report));
    Ok(())
}

/// The fifteen task/feature rows of the first experiment grid. The features
/// column pair mirrors the published table; the no-feature classification row
/// keeps prediction alive through the deepest encoder tap alone.
pub struct AblationRow {
    pub tasks: [bool; 4],
    pub global: bool,
    pub tumor: bool,
}

pub const EXPERIMENT1: [AblationRow; 15] = [
    AblationRow { tasks: [true, false, false, true], global: true, tumor: false },
    AblationRow { tasks: [true, false, true, true], global: true, tumor: false },
    AblationRow { tasks: [true, true, false, true], global: true, tumor: false },
    AblationRow { tasks: [true, true, false, true], global: false, tumor: true },
    AblationRow { tasks: [true, true, false, true], global: true, tumor: true },
    AblationRow { tasks: [false, true, false, true], global: true, tumor: false },
    AblationRow { tasks: [false, true, false, true], global: false, tumor: true },
    AblationRow { tasks: [false, true, false, true], global: true, tumor: true },
    AblationRow { tasks: [false, true, true, true], global: true, tumor: false },
    AblationRow { tasks: [false, true, true, true], global: false, tumor: true },
    AblationRow { tasks: [false, true, true, true], global: true, tumor: true },
    AblationRow { tasks: [false, false, true, true], global: false, tumor: false },
    AblationRow { tasks: [true, true, true, true], global: true, tumor: false },
    AblationRow { tasks: [true, true, true, true], global: false, tumor: true },
    AblationRow { tasks: [true, true, true, true], global: true, tumor: true },
];

pub fn row_label(row: &AblationRow) -> String {
    let names = ["T1", "T2", "T3", "T4"];
    let active: Vec<&str> = names
        .iter()
        .zip(row.tasks.iter())
        .filter_map(|(&n, &on)| on.then_some(n))
        .collect();
    active.join("&")
}

/// Task config for one grid row; `Err` explains why the row is infeasible.
pub fn row_task_config(row: &AblationRow, alpha: f64, lambda: f64) -> Result<TaskConfig, String> {
    if row.tumor && !row.tasks[1] {
        return Err("tumor features require the segmentation task".into());
    }
    let (use_global, taps) = if row.global {
        (true, TaskConfig::default_taps(row.tasks[1]))
    } else if row.tumor {
        (false, Vec::new())
    } else {
        // no multi-scale fusion and no tumor features: prediction sees only
        // the deepest encoder features
        (true, vec![Tap::Enc(5)])
    };
    let cfg = TaskConfig {
        t1_recon: row.tasks[0],
        t2_seg: row.tasks[1],
        t3_class: row.tasks[2],
        t4_pred: row.tasks[3],
        use_global_features: use_global,
        use_tumor_features: row.tumor,
        alpha,
        lambda,
        taps,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

const GRID_HEADER: &str =
    "row,tasks,global_features,tumor_features,seed,status,dice_coef,class_accuracy,class_auc,pred_accuracy,pred_auc";

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    if cfg.data_dir.is_empty() || cfg.out_dir.is_empty() {
        bail!("ablate needs --data and --out");
    }
    prepare_out_dir(&cfg.out_dir, cfg.force)?;
    let samples = load_dataset(&cfg.data_dir)?;
    let out = Path::new(&cfg.out_dir);

    let mut per_seed = String::from(GRID_HEADER);
    per_seed.push('\n');
    let mut mean_rows = String::from(GRID_HEADER);
    mean_rows.push('\n');

    for (i, row) in EXPERIMENT1.iter().enumerate() {
        let label = row_label(row);
        let mark = |on: bool| if on { "yes" } else { "x" };
        match row_task_config(row, cfg.alpha, cfg.lambda) {
            Err(reason) => {
                let line = format!(
                    "{},{},{},{},-,skipped: {reason},/,/,/,/,/\n",
                    i + 1,
                    label,
                    mark(row.global),
                    mark(row.tumor)
                );
                per_seed.push_str(&line);
                mean_rows.push_str(&line);
                println!("row {:2} {label}: skipped ({reason})", i + 1);
            }
            Ok(task) => {
                let mut cols: [Vec<f64>; 5] = Default::default();
                let mut seen = [false; 5];
                for k in 0..cfg.seeds {
                    let seed = cfg.seed + k as u64;
                    let outcome = train_one(cfg, &samples, &task, seed)?;
                    let vals = [
                        outcome.val.dice,
                        outcome.val.class_acc,
                        outcome.val.class_auc,
                        outcome.val.pred_acc,
                        outcome.val.pred_auc,
                    ];
                    for (slot, v) in cols.iter_mut().zip(vals.iter()) {
                        if let Some(v) = v {
                            slot.push(*v);
                        }
                    }
                    for (s, v) in seen.iter_mut().zip(vals.iter()) {
                        *s |= v.is_some();
                    }
                    per_seed.push_str(&format!(
                        "{},{},{},{},{},ok,{},{},{},{},{}\n",
                        i + 1,
                        label,
                        mark(row.global),
                        mark(row.tumor),
                        seed,
                        cell(vals[0]),
                        cell(vals[1]),
                        cell(vals[2]),
                        cell(vals[3]),
                        cell(vals[4]),
                    ));
                }
                let mean_of = |v: &[f64]| -> Option<f64> {
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                let means: Vec<String> = cols.iter().map(|c| cell(mean_of(c))).collect();
                mean_rows.push_str(&format!(
                    "{},{},{},{},mean,ok,{}\n",
                    i + 1,
                    label,
                    mark(row.global),
                    mark(row.tumor),
                    means.join(",")
                ));
                println!(
                    "row {:2} {label} (global {}, tumor {}): dice {} pred_auc {}",
                    i + 1,
                    mark(row.global),
                    mark(row.tumor),
                    means[0],
                    means[4]
                );
            }
        }
    }

    std::fs::write(out.join("ablate_seeds.csv"), per_seed)?;
    std::fs::write(out.join("ablate_mean.csv"), mean_rows)?;
    cfg.write_manifest(out)?;
    Ok(())
}

const SWEEP_HEADER: &str =
    "lambda,alpha,omega,seed,status,dice_coef,class_accuracy,class_auc,pred_accuracy,pred_auc";

pub fn sweep_lambda(cfg: &RunConfig) -> Result<()> {
    if cfg.data_dir.is_empty() || cfg.out_dir.is_empty() {
        bail!("sweep-lambda needs --data and --out");
    }
    prepare_out_dir(&cfg.out_dir, cfg.force)?;
    let samples = load_dataset(&cfg.data_dir)?;
    let out = Path::new(&cfg.out_dir);

    let mut per_seed = String::from(SWEEP_HEADER);
    per_seed.push('\n');
    let mut mean_rows = String::from(SWEEP_HEADER);
    mean_rows.push('\n');

    for &lambda in &cfg.lambdas {
        let alpha = if cfg.auto_alpha {
            cfg.alpha.min(LossWeights::max_alpha(lambda))
        } else {
            cfg.alpha
        };
        let weights = match LossWeights::from_alpha_lambda(alpha, lambda) {
            Ok(w) => w,
            Err(e) => {
                let line = format!("{lambda},{alpha},-,-,rejected: {e},/,/,/,/,/\n");
                per_seed.push_str(&line);
                mean_rows.push_str(&line);
                println!("lambda {lambda}: rejected ({e})");
                continue;
            }
        };
        let task = TaskConfig {
            alpha,
            lambda,
            ..Default::default()
        };
        let mut cols: [Vec<f64>; 5] = Default::default();
        for k in 0..cfg.seeds {
            let seed = cfg.seed + k as u64;
            let outcome = train_one(cfg, &samples, &task, seed)?;
            let vals = [
                outcome.val.dice,
                outcome.val.class_acc,
                outcome.val.class_auc,
                outcome.val.pred_acc,
                outcome.val.pred_auc,
            ];
            for (slot, v) in cols.iter_mut().zip(vals.iter()) {
                if let Some(v) = v {
                    slot.push(*v);
                }
            }
            per_seed.push_str(&format!(
                "{lambda},{alpha},{:.6},{seed},ok,{},{},{},{},{}\n",
                weights.omega,
                cell(vals[0]),
                cell(vals[1]),
                cell(vals[2]),
                cell(vals[3]),
                cell(vals[4]),
            ));
        }
        let mean_of = |v: &[f64]| -> Option<f64> {
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let means: Vec<String> = cols.iter().map(|c| cell(mean_of(c))).collect();
        mean_rows.push_str(&format!(
            "{lambda},{alpha},{:.6},mean,ok,{}\n",
            weights.omega,
            means.join(",")
        ));
        println!(
            "lambda {lambda} (alpha {alpha}): class_acc {} pred_auc {}",
            means[1], means[4]
        );
    }

    std::fs::write(out.join("sweep_seeds.csv"), per_seed)?;
    std::fs::write(out.join("sweep_mean.csv"), mean_rows)?;
    cfg.write_manifest(out)?;
    Ok(())
}

pub fn gradcam(cfg: &RunConfig) -> Result<()> {
    if cfg.checkpoint.is_empty() || cfg.data_dir.is_empty() || cfg.sample.is_empty() {
        bail!("gradcam needs --checkpoint, --data and --sample");
    }
    prepare_out_dir(&cfg.out_dir, cfg.force)?;
    let model = checkpoint::load::<f32>(Path::new(&cfg.checkpoint))?;
    let samples = load_dataset(&cfg.data_dir)?;
    let sample = samples
        .iter()
        .find(|s| s.id == cfg.sample)
        .with_context(|| format!("sample '{}' not in the dataset manifest", cfg.sample))?;
    let target = CamTarget::parse(&cfg.target)?;
    let out = Path::new(&cfg.out_dir);

    for tap in &cfg.taps {
        let map = grad_cam(&model, &sample.image, *tap, target, cfg.upsample)?;
        if map.zero_path {
            println!("warning: heatmap of '{target}' at {tap} is identically zero (no positive gradient contribution)");
        }
        let grid_vol = wnet_core::phantom::Volume {
            dims: map.dims,
            spacing: {
                let f = tap.scale_factor() as f32;
                [
                    sample.image.spacing[0] * f,
                    sample.image.spacing[1] * f,
                    sample.image.spacing[2] * f,
                ]
            },
            voxels: map.grid.clone(),
        };
        let stem = format!("cam_{}_{}_{}", sample.id, target, tap);
        v3d::write_v3d(&grid_vol, &out.join(format!("{stem}.v3d")))?;
        if let Some(up) = &map.upsampled {
            v3d::write_v3d(up, &out.join(format!("{stem}_up.v3d")))?;
            v3d::write_pgm_slices(up, &out.join(format!("{stem}_slices")), &stem)?;
        } else {
            v3d::write_pgm_slices(&grid_vol, &out.join(format!("{stem}_slices")), &stem)?;
        }
        println!("wrote {stem}.v3d (zero_path = {})", map.zero_path);
    }
    cfg.write_manifest(out)?;
    Ok(())
}

pub fn replay(manifest: &Path) -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.apply_file(manifest)?;
    // replaying an existing run overwrites its outputs by definition
    cfg.force = true;
    match cfg.command.as_str() {
        "generate-data" => generate_data(&cfg),
        "train" => train(&cfg),
        "eval" => eval(&cfg),
        "ablate" => ablate(&cfg),
        "sweep-lambda" => sweep_lambda(&cfg),
        "gradcam" => gradcam(&cfg),
        other => bail!("manifest names unknown command '{other}'"),
    }
}
