//! Deterministic synthetic PET-like phantoms. Each sample is a noisy volume
//! with organ-like blobs and one Gaussian tumor; the outcome label is encoded
//! only in a peritumoral shell, so tumor-interior features alone cannot fully
//! solve outcome prediction.

use crate::error::{shape_str, ConfigError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Self {
        Volume {
            dims,
            spacing,
            voxels: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn numel(&self) -> usize {
        self.voxels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One training case. Pathology 0 is the central-column ("esophageal-like")
/// class, 1 the lateral ("lung-like") class.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Volume,
    pub mask: Volume,
    pub pathology: u8,
    pub outcome: u8,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub dims: [usize; 3],
    pub spacing_mm: f32,
    pub n_per_class: usize,
    pub seed: u64,
    /// Intensity added to the peritumoral shell of outcome-1 samples.
    pub peritumoral_effect: f32,
    pub tumor_sigma: (f32, f32),
    pub tumor_peak: f32,
    pub background_level: f32,
    pub noise_sigma: f32,
    pub organ_count: (usize, usize),
    pub organ_sigma: (f32, f32),
    pub organ_amp: f32,
    pub organ_min_dist: f32,
    pub shell_margin: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            dims: [32, 32, 32],
            spacing_mm: 2.0,
            n_per_class: 100,
            seed: 7,
            peritumoral_effect: 0.15,
            tumor_sigma: (2.0, 4.0),
            tumor_peak: 1.0,
            background_level: 0.08,
            noise_sigma: 0.05,
            organ_count: (2, 4),
            organ_sigma: (4.0, 8.0),
            organ_amp: 0.25,
            organ_min_dist: 12.0,
            shell_margin: 3,
        }
    }
}

impl GenConfig {
    /// Scaled-down preset for 16-cube volumes.
    pub fn small16() -> Self {
        GenConfig {
            dims: [16, 16, 16],
            tumor_sigma: (1.2, 2.0),
            organ_sigma: (2.0, 4.0),
            organ_min_dist: 7.0,
            ..Default::default()
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)))
}

/// Box-Muller standard normal draw.
fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// One pass of a separable 3-tap box smoothing with edge replication.
fn box_smooth(vol: &mut Volume) {
    let [d, h, w] = vol.dims;
    let mut tmp = vol.voxels.clone();
    // along x
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                tmp[vol.idx(z, y, x)] = (vol.voxels[vol.idx(z, y, xm)]
                    + vol.voxels[vol.idx(z, y, x)]
                    + vol.voxels[vol.idx(z, y, xp)])
                    / 3.0;
            }
        }
    }
    let mut tmp2 = tmp.clone();
    for z in 0..d {
        for y in 0..h {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            for x in 0..w {
                tmp2[vol.idx(z, y, x)] = (tmp[vol.idx(z, ym, x)]
                    + tmp[vol.idx(z, y, x)]
                    + tmp[vol.idx(z, yp, x)])
                    / 3.0;
            }
        }
    }
    for z in 0..d {
        let zm = z.saturating_sub(1);
        let zp = (z + 1).min(d - 1);
        for y in 0..h {
            for x in 0..w {
                let i = vol.idx(z, y, x);
                vol.voxels[i] =
                    (tmp2[vol.idx(zm, y, x)] + tmp2[vol.idx(z, y, x)] + tmp2[vol.idx(zp, y, x)])
                        / 3.0;
            }
        }
    }
}

fn add_gaussian(vol: &mut Volume, center: [f32; 3], sigma: f32, amp: f32) {
    let [d, h, w] = vol.dims;
    let reach = (3.0 * sigma).ceil() as isize;
    let (cz, cy, cx) = (center[0], center[1], center[2]);
    let z0 = ((cz as isize) - reach).max(0) as usize;
    let z1 = ((cz as isize) + reach + 1).min(d as isize) as usize;
    let y0 = ((cy as isize) - reach).max(0) as usize;
    let y1 = ((cy as isize) + reach + 1).min(h as isize) as usize;
    let x0 = ((cx as isize) - reach).max(0) as usize;
    let x1 = ((cx as isize) + reach + 1).min(w as isize) as usize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for z in z0..z1 {
        for y in y0..y1 {
            for x in x0..x1 {
                let r2 = (z as f32 - cz).powi(2) + (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                vol.voxels[(z * h + y) * w + x] += amp * (-r2 * inv).exp();
            }
        }
    }
}

/// 40%-of-peak threshold inside the tumor support box, then the connected
/// component (6-neighborhood) containing the peak voxel. The component step
/// keeps the mask connected when noise pushes isolated voxels over the
/// threshold.
pub fn threshold_mask(image: &Volume, center: [f32; 3], sigma: f32) -> Volume {
    let [d, h, w] = image.dims;
    let rb = (3.0 * sigma).ceil() as isize;
    let z0 = ((center[0] as isize) - rb).max(0) as usize;
    let z1 = ((center[0] as isize) + rb + 1).min(d as isize) as usize;
    let y0 = ((center[1] as isize) - rb).max(0) as usize;
    let y1 = ((center[1] as isize) + rb + 1).min(h as isize) as usize;
    let x0 = ((center[2] as isize) - rb).max(0) as usize;
    let x1 = ((center[2] as isize) + rb + 1).min(w as isize) as usize;

    let mut peak = f32::NEG_INFINITY;
    let mut peak_voxel = (0usize, 0usize, 0usize);
    for z in z0..z1 {
        for y in y0..y1 {
            for x in x0..x1 {
                let v = image.voxels[(z * h + y) * w + x];
                if v > peak {
                    peak = v;
                    peak_voxel = (z, y, x);
                }
            }
        }
    }
    let threshold = 0.4 * peak;

    let mut mask = Volume::new(image.dims, image.spacing);
    let mut queue = std::collections::VecDeque::new();
    let start = image.idx(peak_voxel.0, peak_voxel.1, peak_voxel.2);
    mask.voxels[start] = 1.0;
    queue.push_back(peak_voxel);
    while let Some((z, y, x)) = queue.pop_front() {
        let neighbors = [
            (z.wrapping_sub(1), y, x),
            (z + 1, y, x),
            (z, y.wrapping_sub(1), x),
            (z, y + 1, x),
            (z, y, x.wrapping_sub(1)),
            (z, y, x + 1),
        ];
        for (nz, ny, nx) in neighbors {
            if nz < z0 || nz >= z1 || ny < y0 || ny >= y1 || nx < x0 || nx >= x1 {
                continue;
            }
            let i = (nz * h + ny) * w + nx;
            if mask.voxels[i] == 0.0 && image.voxels[i] >= threshold {
                mask.voxels[i] = 1.0;
                queue.push_back((nz, ny, nx));
            }
        }
    }
    mask
}

/// Chebyshev dilation of the mask by `margin`, minus the mask itself.
pub fn peritumoral_shell(mask: &Volume, margin: usize) -> Vec<usize> {
    let [d, h, w] = mask.dims;
    let m = margin as isize;
    let mut shell = vec![false; mask.numel()];
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = (z as usize * h + y as usize) * w + x as usize;
                if mask.voxels[i] == 0.0 {
                    continue;
                }
                for dz in -m..=m {
                    for dy in -m..=m {
                        for dx in -m..=m {
                            let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                            if nz < 0
                                || ny < 0
                                || nx < 0
                                || nz >= d as isize
                                || ny >= h as isize
                                || nx >= w as isize
                            {
                                continue;
                            }
                            let j = (nz as usize * h + ny as usize) * w + nx as usize;
                            if mask.voxels[j] == 0.0 {
                                shell[j] = true;
                            }
                        }
                    }
                }
            }
        }
    }
    shell
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| s.then_some(i))
        .collect()
}

/// 6-connectivity check used by the generator invariants and tests.
pub fn mask_is_connected(mask: &Volume) -> bool {
    let [d, h, w] = mask.dims;
    let total = mask.voxels.iter().filter(|&&v| v != 0.0).count();
    if total == 0 {
        return false;
    }
    let start = mask.voxels.iter().position(|&v| v != 0.0).unwrap();
    let mut seen = vec![false; mask.numel()];
    let mut queue = std::collections::VecDeque::new();
    seen[start] = true;
    queue.push_back(start);
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        let z = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        let mut push = |cond: bool, j: usize| {
            if cond && !seen[j] && mask.voxels[j] != 0.0 {
                seen[j] = true;
                queue.push_back(j);
                count += 1;
            }
        };
        push(z > 0, i.wrapping_sub(h * w));
        push(z + 1 < d, i + h * w);
        push(y > 0, i.wrapping_sub(w));
        push(y + 1 < h, i + w);
        push(x > 0, i.wrapping_sub(1));
        push(x + 1 < w, i + 1);
    }
    count == total
}

/// Generates `2 * n_per_class` samples, outcome balanced inside each class,
/// fully determined by the seed.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Sample>, ConfigError> {
    if cfg.dims.iter().any(|&d| d == 0 || d % 16 != 0) {
        return Err(ConfigError::DimsNotDivisible {
            dims: shape_str(&cfg.dims),
        });
    }
    if cfg.n_per_class == 0 {
        return Err(ConfigError::Other("n_per_class must be >= 1".into()));
    }
    let [d, h, w] = cfg.dims;
    let spacing = [cfg.spacing_mm; 3];
    let mut samples = Vec::with_capacity(2 * cfg.n_per_class);

    for class in 0u8..2 {
        for i in 0..cfg.n_per_class {
            let index = class as u64 * cfg.n_per_class as u64 + i as u64;
            let id = format!("s{index:04}");
            let mut rng = sample_rng(cfg.seed, index);
            let outcome = (i % 2) as u8;

            // background: plateau plus smoothed noise
            let mut image = Volume::new(cfg.dims, spacing);
            for v in image.voxels.iter_mut() {
                *v = cfg.background_level + cfg.noise_sigma * normal(&mut rng);
            }
            box_smooth(&mut image);

            // tumor placement: central column for class 0, lateral for class 1
            let jitter = |rng: &mut ChaCha8Rng| rng.random::<f32>() * 4.0 - 2.0;
            let zmargin = (d / 4).max(3) as f32;
            let cz = zmargin + rng.random::<f32>() * (d as f32 - 2.0 * zmargin);
            let (cy, cx);
            if class == 0 {
                cy = h as f32 / 2.0 + jitter(&mut rng);
                cx = w as f32 / 2.0 + jitter(&mut rng);
            } else {
                cy = h as f32 / 2.0 + jitter(&mut rng);
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                cx = w as f32 / 2.0 + side * (w as f32 / 4.0) + jitter(&mut rng);
            }
            let center = [cz, cy, cx];
            let sigma = cfg.tumor_sigma.0
                + rng.random::<f32>() * (cfg.tumor_sigma.1 - cfg.tumor_sigma.0);

            // organ-like blobs, kept away from the tumor
            let organs = cfg.organ_count.0
                + (rng.random::<f32>() * (cfg.organ_count.1 - cfg.organ_count.0 + 1) as f32)
                    as usize;
            let mut placed = 0;
            let mut attempts = 0;
            while placed < organs && attempts < 50 {
                attempts += 1;
                let oc = [
                    rng.random::<f32>() * d as f32,
                    rng.random::<f32>() * h as f32,
                    rng.random::<f32>() * w as f32,
                ];
                let cheb = (oc[0] - center[0])
                    .abs()
                    .max((oc[1] - center[1]).abs())
                    .max((oc[2] - center[2]).abs());
                if cheb < cfg.organ_min_dist {
                    continue;
                }
                let osigma = cfg.organ_sigma.0
                    + rng.random::<f32>() * (cfg.organ_sigma.1 - cfg.organ_sigma.0);
                add_gaussian(&mut image, oc, osigma, cfg.organ_amp * rng.random::<f32>());
                placed += 1;
            }

            add_gaussian(&mut image, center, sigma, cfg.tumor_peak);
            for v in image.voxels.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }

            let mask = threshold_mask(&image, center, sigma);
            debug_assert!(mask_is_connected(&mask));

            if outcome == 1 && cfg.peritumoral_effect > 0.0 {
                // shell additions stay strictly below the mask threshold so the
                // 40% rule keeps identifying the same voxel set afterwards
                let peak = image
                    .voxels
                    .iter()
                    .zip(mask.voxels.iter())
                    .filter(|(_, &m)| m != 0.0)
                    .map(|(&v, _)| v)
                    .fold(f32::NEG_INFINITY, f32::max);
                let cap = 0.4 * peak - 0.02 * peak;
                for i in peritumoral_shell(&mask, cfg.shell_margin) {
                    image.voxels[i] = (image.voxels[i] + cfg.peritumoral_effect).min(cap);
                }
            }

            samples.push(Sample {
                id,
                image,
                mask,
                pathology: class,
                outcome,
                split: Split::Train, // assigned below
            });
        }
    }

    assign_splits(&mut samples, cfg.seed);
    Ok(samples)
}

/// Deterministic stratified 60/20/20 split: within each (pathology, outcome)
/// stratum the ids are shuffled by a rng derived from the seed and cut by
/// fixed ratios.
pub fn assign_splits(samples: &mut [Sample], seed: u64) {
    use rand::seq::SliceRandom;
    let mut strata: std::collections::BTreeMap<(u8, u8), Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        strata.entry((s.pathology, s.outcome)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5354524154)); // "STRAT"
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let k = members.len();
        let n_train = k * 6 / 10;
        let n_val = k * 2 / 10;
        for (pos, &idx) in members.iter().enumerate() {
            samples[idx].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
}

/// Nearest-neighbor (k=1) resampling to a new isotropic/anisotropic spacing.
pub fn resample_nearest(vol: &Volume, target: [f32; 3]) -> Result<Volume, ConfigError> {
    if target.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(ConfigError::Other(format!(
            "target spacing must be positive, got {target:?}"
        )));
    }
    if target == vol.spacing {
        return Ok(vol.clone());
    }
    let out_dims: [usize; 3] = std::array::from_fn(|k| {
        ((vol.dims[k] as f64 * vol.spacing[k] as f64 / target[k] as f64).round() as usize).max(1)
    });
    let mut out = Volume::new(out_dims, target);
    let [oh, ow] = [out_dims[1], out_dims[2]];
    let [h, w] = [vol.dims[1], vol.dims[2]];
    for z in 0..out_dims[0] {
        let sz = src_index(z, target[0], vol.spacing[0], vol.dims[0]);
        for y in 0..oh {
            let sy = src_index(y, target[1], vol.spacing[1], vol.dims[1]);
            for x in 0..ow {
                let sx = src_index(x, target[2], vol.spacing[2], vol.dims[2]);
                out.voxels[(z * oh + y) * ow + x] = vol.voxels[(sz * h + sy) * w + sx];
            }
        }
    }
    Ok(out)
}

#[inline]
fn src_index(i: usize, target: f32, source: f32, dim: usize) -> usize {
    let pos = (i as f64 + 0.5) * target as f64 / source as f64;
    (pos.floor() as usize).min(dim - 1)
}
