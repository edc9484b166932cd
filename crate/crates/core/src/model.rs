//! The four-task W-shaped network: shared encoder, reconstruction decoder
//! (T1), segmentation decoder (T2), pathology classification head (T3) and
//! the multi-scale outcome prediction branch (T4), plus every task loss and
//! the constrained global loss
//! `alpha*Lrecon + beta*Lseg + omega*Lclass + lambda*Lpredict` with
//! `beta = alpha` and `omega = 1 - (lambda + 2*alpha)`.

use crate::error::{ConfigError, TensorError, TrainError};
use crate::nn::{
    Bindings, Conv3dLayer, Decoder, DenseLayer, Encoder, Initializer, Mode, Param,
};
use crate::scalar::Scalar;
use crate::tape::{Activation, Tape, TensorId};
use crate::tensor::Tensor;
use rand::Rng;

/// Logits are clamped to this magnitude before any sigmoid, keeping
/// probabilities strictly inside (0, 1) in f32.
pub const LOGIT_CLAMP: f64 = 15.0;
/// Probability clamp for the cross-entropy terms.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing constant of the dice coefficient.
pub const DICE_EPS: f64 = 1.0;

/// Feature tap: an encoder level (1..=5, pre-pool) or a segmentation-decoder
/// stage (1..=4, `dec4` at input resolution).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tap {
    Enc(u8),
    Dec(u8),
}

impl Tap {
    pub const ALL: [Tap; 9] = [
        Tap::Enc(1),
        Tap::Enc(2),
        Tap::Enc(3),
        Tap::Enc(4),
        Tap::Enc(5),
        Tap::Dec(1),
        Tap::Dec(2),
        Tap::Dec(3),
        Tap::Dec(4),
    ];

    pub fn parse(s: &str) -> Result<Tap, ConfigError> {
        let tap = match s {
            "enc1" => Tap::Enc(1),
            "enc2" => Tap::Enc(2),
            "enc3" => Tap::Enc(3),
            "enc4" => Tap::Enc(4),
            "enc5" => Tap::Enc(5),
            "dec1" => Tap::Dec(1),
            "dec2" => Tap::Dec(2),
            "dec3" => Tap::Dec(3),
            "dec4" => Tap::Dec(4),
            _ => {
                return Err(ConfigError::UnknownTap {
                    got: s.to_string(),
                    valid: Tap::ALL.map(|t| t.to_string()).join(", "),
                })
            }
        };
        Ok(tap)
    }

    pub fn channels(&self, base: usize) -> usize {
        match self {
            Tap::Enc(l) => base << (*l as usize - 1),
            Tap::Dec(s) => base << (4 - *s as usize),
        }
    }

    /// Spatial downscale factor relative to the input volume.
    pub fn scale_factor(&self) -> usize {
        match self {
            Tap::Enc(l) => 1 << (*l as usize - 1),
            Tap::Dec(s) => 1 << (4 - *s as usize),
        }
    }

    pub fn needs_seg_decoder(&self) -> bool {
        matches!(self, Tap::Dec(_))
    }
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tap::Enc(l) => write!(f, "enc{l}"),
            Tap::Dec(s) => write!(f, "dec{s}"),
        }
    }
}

/// Which tasks run, which feature paths feed prediction, and the loss
/// weighting. `beta` is always equal to `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub t1_recon: bool,
    pub t2_seg: bool,
    pub t3_class: bool,
    pub t4_pred: bool,
    pub use_global_features: bool,
    pub use_tumor_features: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub taps: Vec<Tap>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            t1_recon: true,
            t2_seg: true,
            t3_class: true,
            t4_pred: true,
            use_global_features: true,
            use_tumor_features: true,
            alpha: 0.2,
            lambda: 0.3,
            taps: Self::default_taps(true),
        }
    }
}

impl TaskConfig {
    /// Three deepest encoder levels plus the final segmentation-decoder map
    /// (the decoder tap is dropped when T2 is off).
    pub fn default_taps(with_seg: bool) -> Vec<Tap> {
        if with_seg {
            vec![Tap::Enc(3), Tap::Enc(4), Tap::Enc(5), Tap::Dec(4)]
        } else {
            vec![Tap::Enc(3), Tap::Enc(4), Tap::Enc(5)]
        }
    }

    /// Alternate preset following the scale-4/5/6 numbering (scales count
    /// down the encoder and continue into the decoder).
    pub fn scale456_taps() -> Vec<Tap> {
        vec![Tap::Enc(4), Tap::Enc(5), Tap::Dec(1)]
    }

    pub fn weights(&self) -> Result<LossWeights, ConfigError> {
        LossWeights::from_alpha_lambda(self.alpha, self.lambda)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.weights()?;
        if self.t4_pred {
            if !self.use_global_features && !self.use_tumor_features {
                return Err(ConfigError::NoFeaturePath);
            }
            if self.use_tumor_features && !self.t2_seg {
                return Err(ConfigError::TumorWithoutSeg);
            }
            if self.use_global_features {
                if self.taps.is_empty() {
                    return Err(ConfigError::NoTaps);
                }
                for tap in &self.taps {
                    if tap.needs_seg_decoder() && !self.t2_seg {
                        return Err(ConfigError::DecoderTapWithoutSeg {
                            tap: tap.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn active(&self) -> [bool; 4] {
        [self.t1_recon, self.t2_seg, self.t3_class, self.t4_pred]
    }
}

/// The constrained loss weights of the global objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn from_alpha_lambda(alpha: f64, lambda: f64) -> Result<Self, ConfigError> {
        if alpha < 0.0 {
            return Err(ConfigError::NegativeWeight {
                name: "alpha",
                value: alpha,
            });
        }
        if lambda < 0.0 {
            return Err(ConfigError::NegativeWeight {
                name: "lambda",
                value: lambda,
            });
        }
        let omega = 1.0 - (lambda + 2.0 * alpha);
        if omega < 0.0 {
            return Err(ConfigError::NegativeOmega {
                lambda,
                alpha,
                omega,
            });
        }
        Ok(LossWeights {
            alpha,
            beta: alpha,
            omega,
            lambda,
        })
    }

    /// Largest alpha admissible for a given lambda.
    pub fn max_alpha(lambda: f64) -> f64 {
        ((1.0 - lambda) / 2.0).max(0.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.omega, self.lambda]
    }

    /// Weights actually applied: disabled tasks contribute zero and the
    /// remaining mass is renormalized to sum to one.
    pub fn effective(&self, active: [bool; 4]) -> [f64; 4] {
        let mut w = self.as_array();
        for (wi, on) in w.iter_mut().zip(active.iter()) {
            if !on {
                *wi = 0.0;
            }
        }
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            for wi in w.iter_mut() {
                *wi /= total;
            }
        }
        w
    }
}

/// Model build parameters independent of the task mix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub input_dims: [usize; 3],
    pub seed: u64,
    pub intra_block_residual: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 8,
            input_dims: [32, 32, 32],
            seed: 42,
            intra_block_residual: false,
            dropout: 0.5,
        }
    }
}

/// Classification head: conv, maxpool (skipped when the bottleneck is too
/// small to pool), flatten, then 128/64/1 dense layers with dropout.
#[derive(Debug, Clone)]
struct ClassHead<S> {
    conv: Conv3dLayer<S>,
    pool: bool,
    dense1: DenseLayer<S>,
    dense2: DenseLayer<S>,
    out: DenseLayer<S>,
    dropout: f64,
}

impl<S: Scalar> ClassHead<S> {
    fn new(base: usize, input_dims: [usize; 3], dropout: f64, init: &mut Initializer) -> Self {
        let ch = base * 16;
        let bottleneck = input_dims.map(|d| d / 16);
        let pool = bottleneck.iter().all(|&d| d >= 2 && d % 2 == 0);
        let spatial: usize = bottleneck
            .iter()
            .map(|&d| if pool { d / 2 } else { d })
            .product();
        ClassHead {
            conv: Conv3dLayer::new("class.conv", ch, ch, Activation::Relu, init),
            pool,
            dense1: DenseLayer::new("class.dense1", ch * spatial, 128, Activation::Elu, init),
            dense2: DenseLayer::new("class.dense2", 128, 64, Activation::Elu, init),
            out: DenseLayer::new("class.out", 64, 1, Activation::Linear, init),
            dropout,
        }
    }

    fn forward<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        bottleneck: TensorId,
        training: bool,
        rng: &mut R,
        binds: &mut Bindings,
    ) -> Result<TensorId, TensorError> {
        let mut x = self.conv.forward(tape, bottleneck, binds)?;
        if self.pool {
            x = tape.maxpool3d(x)?;
        }
        let flat = tape.flatten(x)?;
        let h1 = self.dense1.forward(tape, flat, binds)?;
        let h1 = tape.dropout(h1, self.dropout, training, rng)?;
        let h2 = self.dense2.forward(tape, h1, binds)?;
        let h2 = tape.dropout(h2, self.dropout, training, rng)?;
        self.out.forward(tape, h2, binds)
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.conv.params();
        p.extend(self.dense1.params());
        p.extend(self.dense2.params());
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.conv.params_mut();
        p.extend(self.dense1.params_mut());
        p.extend(self.dense2.params_mut());
        p.extend(self.out.params_mut());
        p
    }
}

/// Outcome prediction branch. The tumor path runs a small CNN over the input
/// masked by the predicted soft segmentation; the global path pools the
/// configured taps. Fully connected widths are 128, 128, 1.
#[derive(Debug, Clone)]
struct PredBranch<S> {
    conv1: Conv3dLayer<S>,
    conv2: Conv3dLayer<S>,
    conv3: Conv3dLayer<S>,
    conv4: Conv3dLayer<S>,
    dense1: DenseLayer<S>,
    dense2: DenseLayer<S>,
    out: DenseLayer<S>,
    feature_len: usize,
}

impl<S: Scalar> PredBranch<S> {
    fn new(base: usize, task: &TaskConfig, init: &mut Initializer) -> Self {
        let tumor_len = 2 * base;
        let global_len: usize = task.taps.iter().map(|t| t.channels(base)).sum();
        let mut feature_len = 0;
        if task.use_tumor_features {
            feature_len += tumor_len;
        }
        if task.use_global_features {
            feature_len += global_len;
        }
        let feature_len = feature_len.max(1);
        PredBranch {
            conv1: Conv3dLayer::new("pred.tumor.conv1", 1, base, Activation::Relu, init),
            conv2: Conv3dLayer::new("pred.tumor.conv2", base, base, Activation::Relu, init),
            conv3: Conv3dLayer::new("pred.tumor.conv3", base, 2 * base, Activation::Relu, init),
            conv4: Conv3dLayer::new(
                "pred.tumor.conv4",
                2 * base,
                2 * base,
                Activation::Relu,
                init,
            ),
            dense1: DenseLayer::new("pred.dense1", feature_len, 128, Activation::Elu, init),
            dense2: DenseLayer::new("pred.dense2", 128, 128, Activation::Elu, init),
            out: DenseLayer::new("pred.out", 128, 1, Activation::Linear, init),
            feature_len,
        }
    }

    fn tumor_features(
        &self,
        tape: &mut Tape<S>,
        input: TensorId,
        seg_prob: TensorId,
        binds: &mut Bindings,
    ) -> Result<TensorId, TensorError> {
        let masked = tape.mul(input, seg_prob)?;
        let x = self.conv1.forward(tape, masked, binds)?;
        let x = self.conv2.forward(tape, x, binds)?;
        let x = tape.maxpool3d(x)?;
        let x = self.conv3.forward(tape, x, binds)?;
        let x = self.conv4.forward(tape, x, binds)?;
        tape.global_average_pool(x)
    }

    fn forward(
        &self,
        tape: &mut Tape<S>,
        features: TensorId,
        binds: &mut Bindings,
    ) -> Result<TensorId, TensorError> {
        let h1 = self.dense1.forward(tape, features, binds)?;
        let h2 = self.dense2.forward(tape, h1, binds)?;
        self.out.forward(tape, h2, binds)
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.conv3.params());
        p.extend(self.conv4.params());
        p.extend(self.dense1.params());
        p.extend(self.dense2.params());
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p.extend(self.conv3.params_mut());
        p.extend(self.conv4.params_mut());
        p.extend(self.dense1.params_mut());
        p.extend(self.dense2.params_mut());
        p.extend(self.out.params_mut());
        p
    }
}

/// One forward pass: output ids on the tape plus every tap for Grad-CAM.
pub struct WNetRun {
    pub recon: Option<TensorId>,
    pub seg_prob: Option<TensorId>,
    pub class_logit: Option<TensorId>,
    pub class_prob: Option<TensorId>,
    pub outcome_logit: Option<TensorId>,
    pub outcome_prob: Option<TensorId>,
    pub taps: Vec<(Tap, TensorId)>,
    pub bindings: Bindings,
}

impl WNetRun {
    pub fn tap(&self, tap: Tap) -> Option<TensorId> {
        self.taps.iter().find(|(t, _)| *t == tap).map(|(_, id)| *id)
    }
}

pub struct WNet<S> {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub mode: Mode,
    encoder: Encoder<S>,
    recon_dec: Decoder<S>,
    seg_dec: Decoder<S>,
    class_head: ClassHead<S>,
    pred: PredBranch<S>,
}

impl<S: Scalar> WNet<S> {
    pub fn new(model: ModelConfig, task: TaskConfig) -> Result<Self, ConfigError> {
        task.validate()?;
        Encoder::<S>::check_dims(model.input_dims)?;
        if model.base_channels < 1 {
            return Err(ConfigError::ZeroWidth);
        }
        let mut init = Initializer::new(model.seed);
        let encoder = Encoder::new(
            model.base_channels,
            model.dropout,
            model.intra_block_residual,
            &mut init,
        )?;
        let recon_dec = Decoder::new("recon", model.base_channels, Activation::Linear, &mut init);
        let seg_dec = Decoder::new("seg", model.base_channels, Activation::Sigmoid, &mut init);
        let class_head = ClassHead::new(model.base_channels, model.input_dims, model.dropout, &mut init);
        let pred = PredBranch::new(model.base_channels, &task, &mut init);
        Ok(WNet {
            model,
            task,
            mode: Mode::Eval,
            encoder,
            recon_dec,
            seg_dec,
            class_head,
            pred,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Expected prediction feature vector length for the current task config.
    pub fn pred_feature_len(&self) -> usize {
        self.pred.feature_len
    }

    /// All parameters in fixed declaration order.
    pub fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.encoder.params();
        p.extend(self.recon_dec.params());
        p.extend(self.seg_dec.params());
        p.extend(self.class_head.params());
        p.extend(self.pred.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.recon_dec.params_mut());
        p.extend(self.seg_dec.params_mut());
        p.extend(self.class_head.params_mut());
        p.extend(self.pred.params_mut());
        p
    }

    /// Runs the enabled heads over a `[N, 1, D, H, W]` batch already on the
    /// tape. The shared encoder is evaluated exactly once.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        input: TensorId,
        rng: &mut R,
    ) -> Result<WNetRun, TrainError> {
        self.task.validate()?;
        let shape = tape.shape(input).to_vec();
        if shape.len() != 5 || shape[1] != 1 {
            return Err(TrainError::Tensor(TensorError::BadRank {
                op: "wnet forward",
                expected: 5,
                got: crate::error::shape_str(&shape),
            }));
        }
        Encoder::<S>::check_dims([shape[2], shape[3], shape[4]])?;
        let training = self.mode == Mode::Train;
        let mut binds = Bindings::new();

        let enc = self
            .encoder
            .forward(tape, input, training, rng, &mut binds)?;
        let mut taps: Vec<(Tap, TensorId)> = enc
            .taps
            .iter()
            .enumerate()
            .map(|(i, &id)| (Tap::Enc(i as u8 + 1), id))
            .collect();

        let mut seg_prob = None;
        if self.task.t2_seg {
            let out = self
                .seg_dec
                .forward(tape, enc.bottleneck, &enc.taps[..4], &mut binds)?;
            for (s, &id) in out.stage_taps.iter().enumerate() {
                taps.push((Tap::Dec(s as u8 + 1), id));
            }
            seg_prob = Some(out.output);
        }

        let mut recon = None;
        if self.task.t1_recon {
            let out = self
                .recon_dec
                .forward(tape, enc.bottleneck, &enc.taps[..4], &mut binds)?;
            recon = Some(out.output);
        }

        let mut class_logit = None;
        let mut class_prob = None;
        if self.task.t3_class {
            let logit = self
                .class_head
                .forward(tape, enc.bottleneck, training, rng, &mut binds)?;
            let clamped = tape.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP);
            class_logit = Some(logit);
            class_prob = Some(tape.sigmoid(clamped));
        }

        let mut outcome_logit = None;
        let mut outcome_prob = None;
        if self.task.t4_pred {
            let mut features = Vec::new();
            if self.task.use_tumor_features {
                let seg = seg_prob.expect("validated: tumor features require t2");
                features.push(self.pred.tumor_features(tape, input, seg, &mut binds)?);
            }
            if self.task.use_global_features {
                for tap in &self.task.taps {
                    let id = taps
                        .iter()
                        .find(|(t, _)| t == tap)
                        .map(|(_, id)| *id)
                        .expect("validated: tap available");
                    features.push(tape.global_average_pool(id)?);
                }
            }
            let fused = if features.len() == 1 {
                features[0]
            } else {
                tape.concat_channels(&features)?
            };
            let logit = self.pred.forward(tape, fused, &mut binds)?;
            let clamped = tape.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP);
            outcome_logit = Some(logit);
            outcome_prob = Some(tape.sigmoid(clamped));
        }

        Ok(WNetRun {
            recon,
            seg_prob,
            class_logit,
            class_prob,
            outcome_logit,
            outcome_prob,
            taps,
            bindings: binds,
        })
    }
}

// ── Losses ──────────────────────────────────────────────────────────

/// Mean squared error over all voxels and batch entries.
pub fn loss_recon<S: Scalar>(
    tape: &mut Tape<S>,
    recon: TensorId,
    target: TensorId,
) -> Result<TensorId, TensorError> {
    let diff = tape.sub(recon, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Soft dice `(2*sum(p*q) + eps) / (sum(p) + sum(q) + eps)`.
pub fn dice_coef<S: Scalar>(
    tape: &mut Tape<S>,
    pred: TensorId,
    truth: TensorId,
    eps: f64,
) -> Result<TensorId, TensorError> {
    let inter = tape.mul(pred, truth)?;
    let inter_sum = tape.sum(inter);
    let num = tape.mul_scalar(inter_sum, 2.0);
    let num = tape.add_scalar(num, eps);
    let p_sum = tape.sum(pred);
    let q_sum = tape.sum(truth);
    let denom = tape.add(p_sum, q_sum)?;
    let denom = tape.add_scalar(denom, eps);
    tape.div(num, denom)
}

/// Segmentation loss: negated dice coefficient.
pub fn loss_seg<S: Scalar>(
    tape: &mut Tape<S>,
    pred: TensorId,
    truth: TensorId,
) -> Result<TensorId, TensorError> {
    let dice = dice_coef(tape, pred, truth, DICE_EPS)?;
    Ok(tape.neg(dice))
}

/// Binary cross entropy with probability clamping; `labels` must be 0/1 and
/// carries no gradient.
pub fn loss_bce<S: Scalar>(
    tape: &mut Tape<S>,
    prob: TensorId,
    labels: TensorId,
) -> Result<TensorId, TensorError> {
    let p = tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS);
    let ln_p = tape.ln(p);
    let pos = tape.mul(labels, ln_p)?;
    let neg_p = tape.mul_scalar(prob, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let q = tape.clamp(one_minus_p, PROB_EPS, 1.0 - PROB_EPS);
    let ln_q = tape.ln(q);
    let neg_y = tape.mul_scalar(labels, -1.0);
    let one_minus_y = tape.add_scalar(neg_y, 1.0);
    let negt = tape.mul(one_minus_y, ln_q)?;
    let sum = tape.add(pos, negt)?;
    let mean = tape.mean(sum);
    Ok(tape.neg(mean))
}

/// Per-task losses plus the weighted global objective.
pub struct LossBundle {
    pub total: TensorId,
    pub recon: Option<TensorId>,
    pub seg: Option<TensorId>,
    pub class: Option<TensorId>,
    pub pred: Option<TensorId>,
    pub effective_weights: [f64; 4],
}

/// Targets for one batch, already on the tape as no-grad leaves.
pub struct BatchTargets {
    pub recon: TensorId,
    pub mask: TensorId,
    pub class_labels: TensorId,
    pub outcome_labels: TensorId,
}

pub fn loss_global<S: Scalar>(
    tape: &mut Tape<S>,
    run: &WNetRun,
    targets: &BatchTargets,
    task: &TaskConfig,
) -> Result<LossBundle, TrainError> {
    let weights = task.weights()?;
    let eff = weights.effective(task.active());

    let mut terms: Vec<TensorId> = Vec::new();
    let mut bundle = LossBundle {
        total: TensorId(0),
        recon: None,
        seg: None,
        class: None,
        pred: None,
        effective_weights: eff,
    };

    if let Some(recon) = run.recon {
        let l = loss_recon(tape, recon, targets.recon)?;
        bundle.recon = Some(l);
        terms.push(tape.mul_scalar(l, eff[0]));
    }
    if let Some(seg) = run.seg_prob {
        let l = loss_seg(tape, seg, targets.mask)?;
        bundle.seg = Some(l);
        terms.push(tape.mul_scalar(l, eff[1]));
    }
    if let Some(prob) = run.class_prob {
        let l = loss_bce(tape, prob, targets.class_labels)?;
        bundle.class = Some(l);
        terms.push(tape.mul_scalar(l, eff[2]));
    }
    if let Some(prob) = run.outcome_prob {
        let l = loss_bce(tape, prob, targets.outcome_labels)?;
        bundle.pred = Some(l);
        terms.push(tape.mul_scalar(l, eff[3]));
    }

    let mut total = match terms.first() {
        Some(&t) => t,
        None => {
            return Err(TrainError::Config(ConfigError::Other(
                "no active task produced a loss".into(),
            )))
        }
    };
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    bundle.total = total;
    Ok(bundle)
}

/// Builds the `[N, 1, D, H, W]` input leaf and target leaves for a batch of
/// (volume, mask, pathology, outcome) tuples.
pub struct BatchData<S> {
    pub input: Tensor<S>,
    pub mask: Tensor<S>,
    pub class_labels: Tensor<S>,
    pub outcome_labels: Tensor<S>,
}

impl<S: Scalar> BatchData<S> {
    pub fn from_parts(
        volumes: &[&[S]],
        masks: &[&[S]],
        pathology: &[u8],
        outcome: &[u8],
        dims: [usize; 3],
    ) -> Self {
        let n = volumes.len();
        let plane: usize = dims.iter().product();
        let mut input = Vec::with_capacity(n * plane);
        let mut mask = Vec::with_capacity(n * plane);
        for i in 0..n {
            input.extend_from_slice(volumes[i]);
            mask.extend_from_slice(masks[i]);
        }
        let shape = vec![n, 1, dims[0], dims[1], dims[2]];
        BatchData {
            input: Tensor {
                shape: shape.clone(),
                data: input,
                requires_grad: false,
                grad: None,
                node: None,
            },
            mask: Tensor {
                shape,
                data: mask,
                requires_grad: false,
                grad: None,
                node: None,
            },
            class_labels: Tensor {
                shape: vec![n, 1],
                data: pathology.iter().map(|&v| S::from_f64(v as f64)).collect(),
                requires_grad: false,
                grad: None,
                node: None,
            },
            outcome_labels: Tensor {
                shape: vec![n, 1],
                data: outcome.iter().map(|&v| S::from_f64(v as f64)).collect(),
                requires_grad: false,
                grad: None,
                node: None,
            },
        }
    }

    pub fn place(self, tape: &mut Tape<S>) -> (TensorId, BatchTargets) {
        let input = tape.leaf(self.input);
        let mask = tape.leaf(self.mask);
        let class_labels = tape.leaf(self.class_labels);
        let outcome_labels = tape.leaf(self.outcome_labels);
        (
            input,
            BatchTargets {
                recon: input,
                mask,
                class_labels,
                outcome_labels,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(99)
    }

    fn tiny_model(task: TaskConfig) -> WNet<f32> {
        let model = ModelConfig {
            base_channels: 2,
            input_dims: [16, 16, 16],
            seed: 5,
            ..Default::default()
        };
        WNet::new(model, task).unwrap()
    }

    fn tiny_batch(n: usize) -> BatchData<f32> {
        let plane = 16 * 16 * 16;
        let vols: Vec<Vec<f32>> = (0..n)
            .map(|i| (0..plane).map(|j| ((i + j) % 17) as f32 * 0.05).collect())
            .collect();
        let masks: Vec<Vec<f32>> = (0..n)
            .map(|i| (0..plane).map(|j| ((i + j) % 5 == 0) as u8 as f32).collect())
            .collect();
        let vrefs: Vec<&[f32]> = vols.iter().map(|v| v.as_slice()).collect();
        let mrefs: Vec<&[f32]> = masks.iter().map(|v| v.as_slice()).collect();
        let pathology: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let outcome: Vec<u8> = (0..n).map(|i| ((i / 2) % 2) as u8).collect();
        BatchData::from_parts(&vrefs, &mrefs, &pathology, &outcome, [16, 16, 16])
    }

    #[test]
    fn eq8_weights() {
        let w = LossWeights::from_alpha_lambda(0.2, 0.3).unwrap();
        assert_eq!(w.alpha, w.beta);
        assert!((w.omega - 0.3).abs() < 1e-12);
        assert!((w.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // boundary: omega exactly zero silences classification
        let w = LossWeights::from_alpha_lambda(0.25, 0.5).unwrap();
        assert_eq!(w.omega, 0.0);

        // negative omega rejected
        assert!(matches!(
            LossWeights::from_alpha_lambda(0.2, 0.9),
            Err(ConfigError::NegativeOmega { .. })
        ));
    }

    #[test]
    fn disabled_task_weights_renormalize() {
        let w = LossWeights::from_alpha_lambda(0.2, 0.3).unwrap();
        let eff = w.effective([false, true, false, true]);
        assert_eq!(eff[0], 0.0);
        assert_eq!(eff[2], 0.0);
        assert!((eff[1] - 0.4).abs() < 1e-12);
        assert!((eff[3] - 0.6).abs() < 1e-12);
        assert!((eff.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let mut cfg = TaskConfig::default();
        cfg.use_global_features = false;
        cfg.use_tumor_features = false;
        assert!(matches!(cfg.validate(), Err(ConfigError::NoFeaturePath)));

        let mut cfg = TaskConfig::default();
        cfg.t2_seg = false;
        assert!(matches!(cfg.validate(), Err(ConfigError::TumorWithoutSeg)));

        let mut cfg = TaskConfig::default();
        cfg.t2_seg = false;
        cfg.use_tumor_features = false;
        // default taps still reference dec4
        assert!(matches!(
            cfg.validate(),
            Err(ConfigError::DecoderTapWithoutSeg { .. })
        ));
        cfg.taps = TaskConfig::default_taps(false);
        cfg.validate().unwrap();
    }

    #[test]
    fn forward_produces_all_enabled_outputs_with_contract_shapes() {
        let net = tiny_model(TaskConfig::default());
        let mut tape = Tape::new();
        let (input, _t) = tiny_batch(4).place(&mut tape);
        let run = net.forward(&mut tape, input, &mut rng()).unwrap();
        assert_eq!(tape.shape(run.recon.unwrap()), &[4, 1, 16, 16, 16]);
        assert_eq!(tape.shape(run.seg_prob.unwrap()), &[4, 1, 16, 16, 16]);
        assert_eq!(tape.shape(run.class_prob.unwrap()), &[4, 1]);
        assert_eq!(tape.shape(run.outcome_prob.unwrap()), &[4, 1]);
        assert!(tape
            .data(run.seg_prob.unwrap())
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
        assert!(tape
            .data(run.outcome_prob.unwrap())
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
        // all nine taps exposed when T2 is on
        assert_eq!(run.taps.len(), 9);
    }

    #[test]
    fn disabling_t1_leaves_other_heads_bitwise_unchanged() {
        let all = tiny_model(TaskConfig::default());
        let mut no_t1_task = TaskConfig::default();
        no_t1_task.t1_recon = false;
        let no_t1 = tiny_model(no_t1_task);

        let mut tape_a = Tape::new();
        let (input_a, _) = tiny_batch(2).place(&mut tape_a);
        let run_a = all.forward(&mut tape_a, input_a, &mut rng()).unwrap();

        let mut tape_b = Tape::new();
        let (input_b, _) = tiny_batch(2).place(&mut tape_b);
        let run_b = no_t1.forward(&mut tape_b, input_b, &mut rng()).unwrap();

        assert!(run_b.recon.is_none());
        assert_eq!(
            tape_a.data(run_a.seg_prob.unwrap()),
            tape_b.data(run_b.seg_prob.unwrap())
        );
        assert_eq!(
            tape_a.data(run_a.class_prob.unwrap()),
            tape_b.data(run_b.class_prob.unwrap())
        );
        assert_eq!(
            tape_a.data(run_a.outcome_prob.unwrap()),
            tape_b.data(run_b.outcome_prob.unwrap())
        );
    }

    #[test]
    fn zero_weight_class_head_outputs_half() {
        let mut net = tiny_model(TaskConfig::default());
        for p in net.params_mut() {
            if p.name.starts_with("class.") {
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let (input, _) = tiny_batch(2).place(&mut tape);
        let run = net.forward(&mut tape, input, &mut rng()).unwrap();
        for &p in tape.data(run.class_prob.unwrap()) {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn feature_vector_lengths_follow_concatenation_arithmetic() {
        let base = 2;
        let mk = |global: bool, tumor: bool| {
            let mut t = TaskConfig::default();
            t.use_global_features = global;
            t.use_tumor_features = tumor;
            tiny_model(t).pred_feature_len()
        };
        let global_len: usize = TaskConfig::default()
            .taps
            .iter()
            .map(|t| t.channels(base))
            .sum();
        let tumor_len = 2 * base;
        assert_eq!(mk(true, false), global_len);
        assert_eq!(mk(false, true), tumor_len);
        assert_eq!(mk(true, true), global_len + tumor_len);
    }

    #[test]
    fn all_zero_mask_gives_zero_tumor_features() {
        let task = TaskConfig {
            use_global_features: false,
            ..Default::default()
        };
        let net = tiny_model(task);
        let mut tape = Tape::new();
        let (input, _) = tiny_batch(1).place(&mut tape);
        let zero_mask = tape.leaf(Tensor::zeros(vec![1, 1, 16, 16, 16]));
        let mut binds = Bindings::new();
        let feats = net
            .pred
            .tumor_features(&mut tape, input, zero_mask, &mut binds)
            .unwrap();
        // masked volume is all zero, convolution biases are zero at init
        assert!(tape.data(feats).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_values_match_hand_cases() {
        let mut tape: Tape<f64> = Tape::new();
        // mse: target [0,2], recon [0,0] -> 2.0
        let recon = tape.leaf_from(vec![2], vec![0.0, 0.0], false).unwrap();
        let target = tape.leaf_from(vec![2], vec![0.0, 2.0], false).unwrap();
        let l = loss_recon(&mut tape, recon, target).unwrap();
        assert_eq!(tape.value_scalar(l), 2.0);
        // symmetry
        let l2 = loss_recon(&mut tape, target, recon).unwrap();
        assert_eq!(tape.value_scalar(l2), 2.0);

        // identical nonempty binary masks -> dice 1.0 for any eps
        let p = tape
            .leaf_from(vec![4], vec![1.0, 0.0, 1.0, 1.0], false)
            .unwrap();
        for eps in [0.1, 1.0, 10.0] {
            let d = dice_coef(&mut tape, p, p, eps).unwrap();
            assert!((tape.value_scalar(d) - 1.0).abs() < 1e-12);
        }

        // both empty -> eps/eps = 1.0
        let z = tape.leaf_from(vec![3], vec![0.0; 3], false).unwrap();
        let d = dice_coef(&mut tape, z, z, 1.0).unwrap();
        assert_eq!(tape.value_scalar(d), 1.0);

        // |X|=|Y|=4, overlap 2, eps=1 -> 5/9
        let x = tape
            .leaf_from(vec![6], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0], false)
            .unwrap();
        let y = tape
            .leaf_from(vec![6], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0], false)
            .unwrap();
        let d = dice_coef(&mut tape, x, y, 1.0).unwrap();
        assert!((tape.value_scalar(d) - 5.0 / 9.0).abs() < 1e-12);

        // bce: y=[1,0], p=[0.5,0.5] -> ln 2
        let prob = tape.leaf_from(vec![2, 1], vec![0.5, 0.5], false).unwrap();
        let lab = tape.leaf_from(vec![2, 1], vec![1.0, 0.0], false).unwrap();
        let l = loss_bce(&mut tape, prob, lab).unwrap();
        assert!((tape.value_scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);

        // perfect prediction stays ~0 (bounded by the clamp)
        let prob = tape.leaf_from(vec![2, 1], vec![1.0, 0.0], false).unwrap();
        let l = loss_bce(&mut tape, prob, lab).unwrap();
        assert!(tape.value_scalar(l) < 1e-6);
    }

    #[test]
    fn bce_matches_two_class_multinomial_expansion() {
        // oracle: -(1/n) sum_i sum_j y_ij ln(p_ij) with one-hot labels
        let multinomial = |probs: &[f64], labels: &[u8]| -> f64 {
            let n = probs.len() as f64;
            let mut s = 0.0;
            for (&p, &y) in probs.iter().zip(labels.iter()) {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                let row = [1.0 - p, p];
                let onehot = [(y == 0) as u8 as f64, (y == 1) as u8 as f64];
                for j in 0..2 {
                    s -= onehot[j] * row[j].ln();
                }
            }
            s / n
        };
        let mut r = rng();
        use rand::Rng;
        let probs: Vec<f64> = (0..16).map(|_| r.random::<f64>()).collect();
        let labels: Vec<u8> = (0..16).map(|_| r.random::<bool>() as u8).collect();
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf_from(vec![16, 1], probs.clone(), false).unwrap();
        let y = tape
            .leaf_from(vec![16, 1], labels.iter().map(|&v| v as f64).collect(), false)
            .unwrap();
        let l = loss_bce(&mut tape, p, y).unwrap();
        assert!((tape.value_scalar(l) - multinomial(&probs, &labels)).abs() < 1e-12);
    }

    #[test]
    fn global_loss_weights_and_batch_permutation_invariance() {
        let net = tiny_model(TaskConfig::default());
        let mut tape = Tape::new();
        let (input, targets) = tiny_batch(4).place(&mut tape);
        let run = net.forward(&mut tape, input, &mut rng()).unwrap();
        let bundle = loss_global(&mut tape, &run, &targets, &net.task).unwrap();
        for (got, want) in bundle.effective_weights.iter().zip([0.2, 0.2, 0.3, 0.3]) {
            assert!((got - want).abs() < 1e-12);
        }
        let total = tape.value_scalar(bundle.total).to_f64();

        // permute the batch: same loss
        let batch = tiny_batch(4);
        let plane = 16 * 16 * 16;
        let perm = [2usize, 0, 3, 1];
        let mut pvol = vec![0f32; 4 * plane];
        let mut pmask = vec![0f32; 4 * plane];
        let mut ppath = vec![0u8; 4];
        let mut pout = vec![0u8; 4];
        for (dst, &src) in perm.iter().enumerate() {
            pvol[dst * plane..(dst + 1) * plane]
                .copy_from_slice(&batch.input.data[src * plane..(src + 1) * plane]);
            pmask[dst * plane..(dst + 1) * plane]
                .copy_from_slice(&batch.mask.data[src * plane..(src + 1) * plane]);
            ppath[dst] = batch.class_labels.data[src] as u8;
            pout[dst] = batch.outcome_labels.data[src] as u8;
        }
        let vrefs: Vec<&[f32]> = pvol.chunks(plane).collect();
        let mrefs: Vec<&[f32]> = pmask.chunks(plane).collect();
        let permuted = BatchData::from_parts(&vrefs, &mrefs, &ppath, &pout, [16, 16, 16]);
        let mut tape2 = Tape::new();
        let (input2, targets2) = permuted.place(&mut tape2);
        let run2 = net.forward(&mut tape2, input2, &mut rng()).unwrap();
        let bundle2 = loss_global(&mut tape2, &run2, &targets2, &net.task).unwrap();
        let total2 = tape2.value_scalar(bundle2.total).to_f64();
        assert!(
            (total - total2).abs() < 1e-5 * total.abs().max(1.0),
            "{total} vs {total2}"
        );
    }

    #[test]
    fn disabled_head_parameters_get_zero_gradient() {
        // only T4 (global-only): both decoders and the class head stay dark
        let task = TaskConfig {
            t1_recon: false,
            t2_seg: false,
            t3_class: false,
            use_tumor_features: false,
            taps: TaskConfig::default_taps(false),
            ..Default::default()
        };
        let net = tiny_model(task);
        let mut tape = Tape::new();
        let (input, targets) = tiny_batch(2).place(&mut tape);
        let run = net.forward(&mut tape, input, &mut rng()).unwrap();
        let bundle = loss_global(&mut tape, &run, &targets, &net.task).unwrap();
        tape.backward(bundle.total).unwrap();

        let bound: std::collections::HashSet<&str> = run
            .bindings
            .pairs
            .iter()
            .map(|(n, _)| n.as_str())
            .collect();
        for p in net.params() {
            let dark = p.name.starts_with("recon.")
                || p.name.starts_with("seg.")
                || p.name.starts_with("class.")
                || p.name.starts_with("pred.tumor.");
            if dark {
                assert!(!bound.contains(p.name.as_str()), "{} was bound", p.name);
            }
        }
        // encoder must receive gradient through the prediction branch
        let enc_binding = run
            .bindings
            .pairs
            .iter()
            .find(|(n, _)| n == "enc.block1.conv1.weight")
            .unwrap();
        let g = tape.grad(enc_binding.1).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shared_trunk_couples_tasks() {
        // encoder gradients with T2+T4 differ from T2 alone on the same data
        let seg_only = TaskConfig {
            t1_recon: false,
            t3_class: false,
            t4_pred: false,
            use_global_features: false,
            use_tumor_features: false,
            ..Default::default()
        };
        let seg_pred = TaskConfig {
            t1_recon: false,
            t3_class: false,
            ..Default::default()
        };
        let grad_of = |task: TaskConfig| -> Vec<f32> {
            let net = tiny_model(task);
            let mut tape = Tape::new();
            let (input, targets) = tiny_batch(2).place(&mut tape);
            let run = net.forward(&mut tape, input, &mut rng()).unwrap();
            let bundle = loss_global(&mut tape, &run, &targets, &net.task).unwrap();
            tape.backward(bundle.total).unwrap();
            let id = run
                .bindings
                .pairs
                .iter()
                .find(|(n, _)| n == "enc.block1.conv1.weight")
                .unwrap()
                .1;
            tape.grad(id).unwrap().to_vec()
        };
        let a = grad_of(seg_only);
        let b = grad_of(seg_pred);
        assert_ne!(a, b);
    }

    #[test]
    fn dice_is_monotone_in_overlap() {
        // increase sum(p*q) holding sum(p), sum(q) fixed
        let mut tape: Tape<f64> = Tape::new();
        let q = tape
            .leaf_from(vec![4], vec![1.0, 1.0, 0.0, 0.0], false)
            .unwrap();
        let mut last = -1.0;
        for shift in [0.0, 0.2, 0.4] {
            let p = tape
                .leaf_from(vec![4], vec![0.5 + shift, 0.5, 0.5 - shift, 0.5], false)
                .unwrap();
            let d = dice_coef(&mut tape, p, q, 1.0).unwrap();
            let v = tape.value_scalar(d);
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn batch_of_four_runs() {
        let net = tiny_model(TaskConfig::default());
        let mut tape = Tape::new();
        let (input, targets) = tiny_batch(4).place(&mut tape);
        let run = net.forward(&mut tape, input, &mut rng()).unwrap();
        let bundle = loss_global(&mut tape, &run, &targets, &net.task).unwrap();
        assert!(tape.value_scalar(bundle.total).is_finite());
    }
}
