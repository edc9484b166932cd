//! Grad-CAM heatmaps at any encoder or decoder tap: channel weights are the
//! spatial mean of the target's gradient at the tap, the map is the
//! ReLU-rectified weighted channel sum, normalized to [0, 1].

use crate::error::{ConfigError, TrainError};
use crate::model::{Tap, WNet};
use crate::nn::Mode;
use crate::phantom::Volume;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamTarget {
    /// Pathology classification logit (pre-sigmoid).
    Class,
    /// Outcome prediction logit (pre-sigmoid).
    Outcome,
    /// Sum of the sigmoid segmentation mask.
    SegSum,
}

impl CamTarget {
    pub fn parse(s: &str) -> Result<CamTarget, ConfigError> {
        match s {
            "class" => Ok(CamTarget::Class),
            "outcome" => Ok(CamTarget::Outcome),
            "seg-sum" | "seg" => Ok(CamTarget::SegSum),
            _ => Err(ConfigError::Other(format!(
                "unknown target '{s}'; valid targets: class, outcome, seg-sum"
            ))),
        }
    }
}

impl std::fmt::Display for CamTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CamTarget::Class => "class",
            CamTarget::Outcome => "outcome",
            CamTarget::SegSum => "seg-sum",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
pub struct Heatmap {
    pub tap: Tap,
    pub target: CamTarget,
    /// Grid at the tap's spatial resolution, normalized to [0, 1] unless the
    /// raw map is identically zero.
    pub dims: [usize; 3],
    pub grid: Vec<f32>,
    /// Nearest-neighbor upsampled map at input resolution, when requested.
    pub upsampled: Option<Volume>,
    /// Set when the target has no gradient path through the tap.
    pub zero_path: bool,
}

/// The core Grad-CAM arithmetic on raw buffers: per-channel weights from the
/// spatial mean of the gradient, rectified weighted sum, max-normalization.
/// Returns the map and whether it came out identically zero.
pub fn cam_from_parts<S: Scalar>(
    activation: &[S],
    grad: &[S],
    channels: usize,
    spatial: usize,
) -> (Vec<f32>, bool) {
    let mut weights = vec![0.0f64; channels];
    for (k, w) in weights.iter_mut().enumerate() {
        let g = &grad[k * spatial..(k + 1) * spatial];
        *w = g.iter().map(|v| v.to_f64()).sum::<f64>() / spatial as f64;
    }
    let mut cam = vec![0.0f32; spatial];
    for (k, &w) in weights.iter().enumerate() {
        let a = &activation[k * spatial..(k + 1) * spatial];
        for (c, &v) in cam.iter_mut().zip(a.iter()) {
            *c += (w * v.to_f64()) as f32;
        }
    }
    for c in cam.iter_mut() {
        if *c < 0.0 {
            *c = 0.0;
        }
    }
    let max = cam.iter().cloned().fold(0.0f32, f32::max);
    if max > 0.0 {
        for c in cam.iter_mut() {
            *c /= max;
        }
        (cam, false)
    } else {
        (cam, true)
    }
}

/// Computes the Grad-CAM heatmap of `target` at `tap` for a single volume.
/// The model must be in eval mode.
pub fn grad_cam<S: Scalar>(
    model: &WNet<S>,
    image: &Volume,
    tap: Tap,
    target: CamTarget,
    upsample: bool,
) -> Result<Heatmap, TrainError> {
    if model.mode != Mode::Eval {
        return Err(TrainError::Config(ConfigError::Other(
            "grad_cam requires the model in eval mode".into(),
        )));
    }
    let mut tape: Tape<S> = Tape::new();
    let [d, h, w] = image.dims;
    let data: Vec<S> = image.voxels.iter().map(|&v| S::from_f64(v as f64)).collect();
    let input = tape.leaf(Tensor::new(vec![1, 1, d, h, w], data).map_err(TrainError::Tensor)?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let run = model.forward(&mut tape, input, &mut rng)?;

    let tap_id = run.tap(tap).ok_or_else(|| {
        let valid: Vec<String> = run.taps.iter().map(|(t, _)| t.to_string()).collect();
        TrainError::Config(ConfigError::UnknownTap {
            got: tap.to_string(),
            valid: valid.join(", "),
        })
    })?;

    let scalar = match target {
        CamTarget::Class => run.class_logit.ok_or(TrainError::Config(ConfigError::Other(
            "target 'class' requires task t3".into(),
        )))?,
        CamTarget::Outcome => run.outcome_logit.ok_or(TrainError::Config(
            ConfigError::Other("target 'outcome' requires task t4".into()),
        ))?,
        CamTarget::SegSum => {
            let seg = run.seg_prob.ok_or(TrainError::Config(ConfigError::Other(
                "target 'seg-sum' requires task t2".into(),
            )))?;
            tape.sum(seg)
        }
    };
    tape.backward(scalar)?;

    let shape = tape.shape(tap_id).to_vec();
    let channels = shape[1];
    let spatial = shape[2] * shape[3] * shape[4];
    let dims = [shape[2], shape[3], shape[4]];
    let (grid, zero_path) = match tape.grad(tap_id) {
        Some(grad) => cam_from_parts(tape.data(tap_id), grad, channels, spatial),
        None => (vec![0.0f32; spatial], true),
    };

    let upsampled = upsample.then(|| {
        let factor = tap.scale_factor();
        let mut vol = Volume::new(image.dims, image.spacing);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    vol.voxels[(z * h + y) * w + x] =
                        grid[((z / factor) * dims[1] + y / factor) * dims[2] + x / factor];
                }
            }
        }
        vol
    });

    Ok(Heatmap {
        tap,
        target,
        dims,
        grid,
        upsampled,
        zero_path,
    })
}

/// Mass centroid of a heatmap in upsampled (input-resolution) coordinates;
/// `None` for an all-zero map.
pub fn heatmap_centroid(map: &Heatmap) -> Option<[f64; 3]> {
    let factor = map.tap.scale_factor() as f64;
    let total: f64 = map.grid.iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return None;
    }
    let [_, gh, gw] = map.dims;
    let mut c = [0.0f64; 3];
    for (i, &v) in map.grid.iter().enumerate() {
        let z = i / (gh * gw);
        let y = (i / gw) % gh;
        let x = i % gw;
        let wgt = v as f64 / total;
        c[0] += wgt * (z as f64 + 0.5) * factor;
        c[1] += wgt * (y as f64 + 0.5) * factor;
        c[2] += wgt * (x as f64 + 0.5) * factor;
    }
    Some(c)
}
