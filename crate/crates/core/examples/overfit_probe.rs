use wnet_core::model::{ModelConfig, TaskConfig, WNet};
use wnet_core::phantom::{generate, GenConfig};
use wnet_core::train::{train, TrainConfig};

fn main() {
    wnet_core::par::init_threads(2);
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let samples = generate(&GenConfig::default()).unwrap();
    let mut picked = Vec::new();
    for class in 0..2u8 {
        for outcome in 0..2u8 {
            picked.push(samples.iter().find(|s| s.pathology == class && s.outcome == outcome).unwrap());
        }
    }
    let bias: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(-3.0);
    let seed: u64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(42);
    let alpha: f64 = std::env::var("OV_ALPHA").ok().and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let lambda: f64 = std::env::var("OV_LAMBDA").ok().and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let t1 = std::env::var("OV_T1").map(|v| v == "1").unwrap_or(true);
    let t3 = std::env::var("OV_T3").map(|v| v == "1").unwrap_or(true);
    let task = TaskConfig { alpha, lambda, t1_recon: t1, t3_class: t3, ..Default::default() };
    let mut model: WNet<f32> = WNet::new(ModelConfig { seed, ..Default::default() }, task.clone()).unwrap();
    for p in model.params_mut() { if p.name == "seg.out.bias" { p.value.data[0] = bias as f32; } }
    let cfg = TrainConfig { epochs, patience: epochs, batch_size: batch, lr, seed };
    let log = train(&mut model, &picked, &picked, &cfg).unwrap();
    let _ = &task;
    for r in log.rows.iter().step_by(5) {
        println!("ep {:3}: glob {:.4} dice {:.3?} seg_loss {:.4?} pred {:.3?}",
            r.epoch, r.val_glob, r.val_dice, r.val_seg, r.val_pred_acc);
    }
    println!("best epoch {} stop {:?}", log.best_epoch, log.stop);
    let report = wnet_core::train::evaluate(&model, &picked, 4).unwrap();
    println!("returned checkpoint: dice {:.3?} pred_acc {:.3?}", report.dice, report.pred_acc);
}
