//! Parameterized layers: seeded initialization, named parameters, the
//! five-block encoder and the symmetric four-stage decoders.

use crate::error::{shape_str, ConfigError, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Activation, Tape, TensorId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named trainable tensor. Names are path-like (`enc.block3.conv1.weight`)
/// and must be unique within a model.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        Param {
            name: name.into(),
            value: value.with_grad(),
        }
    }
}

/// Records which tape leaf each parameter was bound to during one forward
/// pass, so the training loop can read gradients back by name.
#[derive(Debug, Default)]
pub struct Bindings {
    pub pairs: Vec<(String, TensorId)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings { pairs: Vec::new() }
    }

    pub fn bind<S: Scalar>(&mut self, tape: &mut Tape<S>, param: &Param<S>) -> TensorId {
        let id = tape.leaf(param.value.clone());
        self.pairs.push((param.name.clone(), id));
        id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Seeded weight initializer: He-uniform for layers feeding relu/elu,
/// Glorot-uniform for sigmoid/linear outputs, zero biases.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform<S: Scalar>(&mut self, n: usize, limit: f64) -> Vec<S> {
        (0..n)
            .map(|_| S::from_f64((self.rng.random::<f64>() * 2.0 - 1.0) * limit))
            .collect()
    }

    fn limit(fan_in: usize, fan_out: usize, act: Activation) -> f64 {
        match act {
            Activation::Relu | Activation::Elu => (6.0 / fan_in as f64).sqrt(),
            Activation::Sigmoid | Activation::Linear => {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            }
        }
    }

    pub fn conv_weight<S: Scalar>(&mut self, cin: usize, cout: usize, act: Activation) -> Tensor<S> {
        let limit = Self::limit(cin * 27, cout * 27, act);
        Tensor {
            shape: vec![cout, cin, 3, 3, 3],
            data: self.uniform(cout * cin * 27, limit),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn dense_weight<S: Scalar>(&mut self, k: usize, m: usize, act: Activation) -> Tensor<S> {
        let limit = Self::limit(k, m, act);
        Tensor {
            shape: vec![k, m],
            data: self.uniform(k * m, limit),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }
}

/// One 3x3x3 same-padding convolution with its activation.
#[derive(Debug, Clone)]
pub struct Conv3dLayer<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub activation: Activation,
}

impl<S: Scalar> Conv3dLayer<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        activation: Activation,
        init: &mut Initializer,
    ) -> Self {
        Conv3dLayer {
            weight: Param::new(format!("{name}.weight"), init.conv_weight(cin, cout, activation)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![cout])),
            activation,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: TensorId,
        binds: &mut Bindings,
    ) -> Result<TensorId, TensorError> {
        let w = binds.bind(tape, &self.weight);
        let b = binds.bind(tape, &self.bias);
        let y = tape.conv3d(x, w, b)?;
        Ok(tape.activation(y, self.activation))
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub activation: Activation,
}

impl<S: Scalar> DenseLayer<S> {
    pub fn new(
        name: &str,
        k: usize,
        m: usize,
        activation: Activation,
        init: &mut Initializer,
    ) -> Self {
        DenseLayer {
            weight: Param::new(format!("{name}.weight"), init.dense_weight(k, m, activation)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![m])),
            activation,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: TensorId,
        binds: &mut Bindings,
    ) -> Result<TensorId, TensorError> {
        let w = binds.bind(tape, &self.weight);
        let b = binds.bind(tape, &self.bias);
        let y = tape.dense(x, w, b)?;
        Ok(tape.activation(y, self.activation))
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Two 3x3x3 relu convolutions. With `residual` set the block input is added
/// back onto the block output, but only when channel counts match.
#[derive(Debug, Clone)]
pub struct ConvBlock<S> {
    pub conv1: Conv3dLayer<S>,
    pub conv2: Conv3dLayer<S>,
    pub cin: usize,
    pub cout: usize,
    pub residual: bool,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new(name: &str, cin: usize, cout: usize, residual: bool, init: &mut Initializer) -> Self {
        ConvBlock {
            conv1: Conv3dLayer::new(&format!("{name}.conv1"), cin, cout, Activation::Relu, init),
            conv2: Conv3dLayer::new(&format!("{name}.conv2"), cout, cout, Activation::Relu, init),
            cin,
            cout,
            residual,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: TensorId,
        binds: &mut Bindings,
    ) -> Result<TensorId, TensorError> {
        let h = self.conv1.forward(tape, x, binds)?;
        let y = self.conv2.forward(tape, h, binds)?;
        if self.residual && self.cin == self.cout {
            tape.add(y, x)
        } else {
            Ok(y)
        }
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p
    }
}

pub const ENCODER_LEVELS: usize = 5;

/// Per-level shapes of an encoder pass, computable without building weights.
pub fn encoder_shape_plan(base: usize, dims: [usize; 3]) -> Vec<([usize; 3], usize)> {
    let mut plan = Vec::new();
    let (mut d, mut h, mut w) = (dims[0], dims[1], dims[2]);
    for level in 1..=ENCODER_LEVELS {
        let channels = base << (level - 1);
        plan.push(([d, h, w], channels));
        if level < ENCODER_LEVELS {
            d /= 2;
            h /= 2;
            w /= 2;
        }
    }
    plan
}

/// Five conv blocks (ten conv layers), channel width doubling per level,
/// 2x2x2 max pooling after the first four blocks and dropout after the last
/// convolution. Pre-pool feature maps are exposed as taps.
#[derive(Debug, Clone)]
pub struct Encoder<S> {
    pub blocks: Vec<ConvBlock<S>>,
    pub base: usize,
    pub dropout: f64,
}

pub struct EncoderOut {
    /// Pre-pool feature map of each level, `taps[0]` = level 1. The last
    /// entry is the post-dropout bottleneck.
    pub taps: Vec<TensorId>,
    pub bottleneck: TensorId,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(base: usize, dropout: f64, residual: bool, init: &mut Initializer) -> Result<Self, ConfigError> {
        if base < 1 {
            return Err(ConfigError::ZeroWidth);
        }
        let mut blocks = Vec::with_capacity(ENCODER_LEVELS);
        let mut cin = 1;
        for level in 1..=ENCODER_LEVELS {
            let cout = base << (level - 1);
            blocks.push(ConvBlock::new(
                &format!("enc.block{level}"),
                cin,
                cout,
                residual,
                init,
            ));
            cin = cout;
        }
        Ok(Encoder {
            blocks,
            base,
            dropout,
        })
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape<S>,
        input: TensorId,
        training: bool,
        rng: &mut R,
        binds: &mut Bindings,
    ) -> Result<EncoderOut, TensorError> {
        let mut taps = Vec::with_capacity(ENCODER_LEVELS);
        let mut x = input;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x, binds)?;
            if i + 1 < ENCODER_LEVELS {
                taps.push(x);
                x = tape.maxpool3d(x)?;
            }
        }
        let bottleneck = tape.dropout(x, self.dropout, training, rng)?;
        taps.push(bottleneck);
        Ok(EncoderOut { taps, bottleneck })
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    /// Validates that the input volume survives the four pooling stages.
    pub fn check_dims(dims: [usize; 3]) -> Result<(), ConfigError> {
        if dims.iter().any(|&d| d == 0 || d % 16 != 0) {
            return Err(ConfigError::DimsNotDivisible {
                dims: shape_str(&dims),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecoderStage<S> {
    half: Conv3dLayer<S>,
    conv_a: Conv3dLayer<S>,
    conv_b: Conv3dLayer<S>,
}

/// Four stages of (upsample x2, channel-halving conv, concat with the
/// matching encoder tap, two convs), then a single-channel conv with the
/// configured output activation.
#[derive(Debug, Clone)]
pub struct Decoder<S> {
    stages: Vec<DecoderStage<S>>,
    final_conv: Conv3dLayer<S>,
    pub out_activation: Activation,
}

pub struct DecoderOut {
    /// Feature map after each stage, `stage_taps[0]` at 1/8 input resolution,
    /// `stage_taps[3]` at input resolution.
    pub stage_taps: Vec<TensorId>,
    pub output: TensorId,
}

impl<S: Scalar> Decoder<S> {
    /// A sigmoid-output decoder starts its final bias negative so the
    /// predicted mask begins near empty; tumor masks cover a few percent of
    /// the volume and a half-on start drowns the dice overlap term.
    const MASK_BIAS_INIT: f64 = -3.0;

    pub fn new(name: &str, base: usize, out_activation: Activation, init: &mut Initializer) -> Self {
        let mut stages = Vec::with_capacity(4);
        for s in 1..=4usize {
            let cin = base << (5 - s);
            let half = cin / 2;
            stages.push(DecoderStage {
                half: Conv3dLayer::new(
                    &format!("{name}.stage{s}.half"),
                    cin,
                    half,
                    Activation::Relu,
                    init,
                ),
                conv_a: Conv3dLayer::new(
                    &format!("{name}.stage{s}.conv1"),
                    2 * half,
                    half,
                    Activation::Relu,
                    init,
                ),
                conv_b: Conv3dLayer::new(
                    &format!("{name}.stage{s}.conv2"),
                    half,
                    half,
                    Activation::Relu,
                    init,
                ),
            });
        }
        let mut final_conv = Conv3dLayer::new(&format!("{name}.out"), base, 1, out_activation, init);
        if out_activation == Activation::Sigmoid {
            final_conv.bias.value.data[0] = S::from_f64(Self::MASK_BIAS_INIT);
        }
        Decoder {
            stages,
            final_conv,
            out_activation,
        }
    }

    /// `encoder_taps` are the pre-pool maps of levels 1..=4 (level 5 is the
    /// bottleneck itself).
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bottleneck: TensorId,
        encoder_taps: &[TensorId],
        binds: &mut Bindings,
    ) -> Result<DecoderOut, TensorError> {
        let mut x = bottleneck;
        let mut stage_taps = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            let up = tape.upsample3d(x)?;
            let halved = stage.half.forward(tape, up, binds)?;
            let skip = encoder_taps[3 - s];
            let cat = tape.concat_channels(&[halved, skip])?;
            let a = stage.conv_a.forward(tape, cat, binds)?;
            x = stage.conv_b.forward(tape, a, binds)?;
            stage_taps.push(x);
        }
        let output = self.final_conv.forward(tape, x, binds)?;
        Ok(DecoderOut { stage_taps, output })
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        let mut p: Vec<&Param<S>> = self
            .stages
            .iter()
            .flat_map(|s| {
                let mut v = s.half.params();
                v.extend(s.conv_a.params());
                v.extend(s.conv_b.params());
                v
            })
            .collect();
        p.extend(self.final_conv.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p: Vec<&mut Param<S>> = self
            .stages
            .iter_mut()
            .flat_map(|s| {
                let mut v = s.half.params_mut();
                v.extend(s.conv_a.params_mut());
                v.extend(s.conv_b.params_mut());
                v
            })
            .collect();
        p.extend(self.final_conv.params_mut());
        p
    }
}
