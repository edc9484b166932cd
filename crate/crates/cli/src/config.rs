//! Run configuration: a flat key = value text format shared by config files
//! and run manifests, so any run can be replayed from the manifest it wrote.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::path::Path;
use wnet_core::model::{Tap, TaskConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub data_dir: String,
    pub out_dir: String,
    pub seed: u64,
    pub force: bool,
    // generate-data
    pub dims: [usize; 3],
    pub n_per_class: usize,
    pub peritumoral_effect: f32,
    // model / tasks
    pub tasks: [bool; 4],
    pub use_global_features: bool,
    pub use_tumor_features: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub taps: Vec<Tap>,
    pub base_channels: usize,
    pub preset: String,
    // training
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    // eval / gradcam
    pub checkpoint: String,
    pub split: String,
    pub sample: String,
    pub target: String,
    pub upsample: bool,
    // grids
    pub seeds: usize,
    pub lambdas: Vec<f64>,
    pub auto_alpha: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            data_dir: String::new(),
            out_dir: String::new(),
            seed: 42,
            force: false,
            dims: [32, 32, 32],
            n_per_class: 100,
            peritumoral_effect: 0.15,
            tasks: [true; 4],
            use_global_features: true,
            use_tumor_features: true,
            alpha: 0.2,
            lambda: 0.3,
            taps: TaskConfig::default_taps(true),
            base_channels: 8,
            preset: "desk".into(),
            epochs: 60,
            patience: 15,
            batch_size: 4,
            learning_rate: 1e-4,
            checkpoint: String::new(),
            split: "val".into(),
            sample: String::new(),
            target: "outcome".into(),
            upsample: false,
            seeds: 5,
            lambdas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            auto_alpha: false,
        }
    }
}

impl RunConfig {
    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            t1_recon: self.tasks[0],
            t2_seg: self.tasks[1],
            t3_class: self.tasks[2],
            t4_pred: self.tasks[3],
            use_global_features: self.use_global_features,
            use_tumor_features: self.use_tumor_features,
            alpha: self.alpha,
            lambda: self.lambda,
            taps: self.taps.clone(),
        }
    }

    /// The paper preset raises the schedule and width to the reported values;
    /// explicit keys still override.
    pub fn apply_preset(&mut self) {
        if self.preset == "paper" {
            self.epochs = 1500;
            self.patience = 70;
            self.base_channels = 64;
        }
    }

    pub fn to_manifest(&self) -> String {
        let tasks: Vec<&str> = [
            (self.tasks[0], "t1"),
            (self.tasks[1], "t2"),
            (self.tasks[2], "t3"),
            (self.tasks[3], "t4"),
        ]
        .iter()
        .filter_map(|&(on, n)| on.then_some(n))
        .collect();
        let taps: Vec<String> = self.taps.iter().map(|t| t.to_string()).collect();
        let lambdas: Vec<String> = self.lambdas.iter().map(|l| l.to_string()).collect();
        format!(
            "version = {}\ncommand = {}\ndata_dir = {}\nout_dir = {}\nseed = {}\n\
             dims = {}x{}x{}\nn_per_class = {}\nperitumoral_effect = {}\n\
             tasks = {}\nuse_global_features = {}\nuse_tumor_features = {}\nalpha = {}\nlambda = {}\n\
             taps = {}\nbase_channels = {}\npreset = {}\nepochs = {}\npatience = {}\nbatch_size = {}\n\
             learning_rate = {}\ncheckpoint = {}\nsplit = {}\nsample = {}\ntarget = {}\nupsample = {}\n\
             seeds = {}\nlambdas = {}\nauto_alpha = {}\n",
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.data_dir,
            self.out_dir,
            self.seed,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.n_per_class,
            self.peritumoral_effect,
            tasks.join(","),
            self.use_global_features,
            self.use_tumor_features,
            self.alpha,
            self.lambda,
            taps.join(","),
            self.base_channels,
            self.preset,
            self.epochs,
            self.patience,
            self.batch_size,
            self.learning_rate,
            self.checkpoint,
            self.split,
            self.sample,
            self.target,
            self.upsample,
            self.seeds,
            lambdas.join(","),
            self.auto_alpha,
        )
    }

    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.to_manifest())
            .with_context(|| format!("writing {}", path.display()))
    }

    /// Parses a config file or manifest, applying keys over `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        // the preset key changes defaults, so resolve it first
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    lineno + 1
                );
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(p) = map.get("preset") {
            self.preset = p.clone();
            self.apply_preset();
        }
        for (k, v) in &map {
            self.apply_key(k, v)
                .with_context(|| format!("{}: key '{k}'", path.display()))?;
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "version" | "created" | "command" => {
                if key == "command" {
                    self.command = value.to_string();
                }
            }
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            "seed" => self.seed = value.parse()?,
            "force" => self.force = value.parse()?,
            "dims" => self.dims = parse_dims(value)?,
            "n_per_class" => self.n_per_class = value.parse()?,
            "peritumoral_effect" => self.peritumoral_effect = value.parse()?,
            "tasks" => {
                let mut tasks = [false; 4];
                for t in value.split(',').filter(|s| !s.is_empty()) {
                    match t.trim() {
                        "t1" => tasks[0] = true,
                        "t2" => tasks[1] = true,
                        "t3" => tasks[2] = true,
                        "t4" => tasks[3] = true,
                        other => bail!("unknown task '{other}' (expected t1..t4)"),
                    }
                }
                self.tasks = tasks;
            }
            "use_global_features" => self.use_global_features = value.parse()?,
            "use_tumor_features" => self.use_tumor_features = value.parse()?,
            "alpha" => self.alpha = value.parse()?,
            "lambda" => self.lambda = value.parse()?,
            "taps" => {
                self.taps = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| Tap::parse(s.trim()).map_err(anyhow::Error::from))
                    .collect::<Result<Vec<_>>>()?;
            }
            "base_channels" => self.base_channels = value.parse()?,
            "preset" => self.preset = value.to_string(),
            "epochs" => self.epochs = value.parse()?,
            "patience" => self.patience = value.parse()?,
            "batch_size" => self.batch_size = value.parse()?,
            "learning_rate" => self.learning_rate = value.parse()?,
            "checkpoint" => self.checkpoint = value.to_string(),
            "split" => self.split = value.to_string(),
            "sample" => self.sample = value.to_string(),
            "target" => self.target = value.to_string(),
            "upsample" => self.upsample = value.parse()?,
            "seeds" => self.seeds = value.parse()?,
            "lambdas" => {
                self.lambdas = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim().parse::<f64>().map_err(anyhow::Error::from))
                    .collect::<Result<Vec<_>>>()?;
            }
            "auto_alpha" => self.auto_alpha = value.parse()?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }
}

pub fn parse_dims(value: &str) -> Result<[usize; 3]> {
    if let Ok(side) = value.parse::<usize>() {
        return Ok([side; 3]);
    }
    let parts: Vec<usize> = value
        .split('x')
        .map(|p| p.parse::<usize>().map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    if parts.len() != 3 {
        bail!("dims must be a single side length or DxHxW, got '{value}'");
    }
    Ok([parts[0], parts[1], parts[2]])
}
