//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A forward pass pushes tensors and records one [`Op`] per result, so inputs
//! always precede the operations that consume them. `backward` seeds the loss
//! gradient and walks the tape once in reverse, accumulating into every node
//! that (transitively) requires a gradient. Fan-out accumulates additively;
//! replaying `backward` on the same tape reproduces gradients bitwise.

use crate::error::{shape_str, TensorError};
use crate::kernels::{self, ConvDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
    Sigmoid,
    Linear,
}

/// Recorded operations. Backward metadata (argmax routes, dropout masks) is
/// captured at forward time so a replayed backward is exact.
#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    MaxPool3d {
        input: TensorId,
        argmax: Vec<u32>,
    },
    Upsample3d {
        input: TensorId,
    },
    Dense {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    Relu {
        input: TensorId,
    },
    Elu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    Gap {
        input: TensorId,
    },
    ConcatC {
        inputs: Vec<TensorId>,
    },
    Flatten {
        input: TensorId,
    },
    Dropout {
        input: TensorId,
        keep: Vec<bool>,
        scale: f64,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Div {
        a: TensorId,
        b: TensorId,
    },
    AddScalar {
        input: TensorId,
    },
    MulScalar {
        input: TensorId,
        c: f64,
    },
    Ln {
        input: TensorId,
    },
    Clamp {
        input: TensorId,
        lo: f64,
        hi: f64,
    },
    Sum {
        input: TensorId,
    },
    Mean {
        input: TensorId,
    },
}

pub struct Tape<S> {
    nodes: Vec<Tensor<S>>,
    ops: Vec<Op>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf node and returns its id.
    pub fn leaf(&mut self, mut t: Tensor<S>) -> TensorId {
        let id = TensorId(self.nodes.len());
        t.node = Some(id.0);
        t.grad = None;
        self.nodes.push(t);
        self.ops.push(Op::Leaf);
        id
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Result<TensorId, TensorError> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = requires_grad;
        Ok(self.leaf(t))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            node: Some(id.0),
        });
        self.ops.push(op);
        id
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value_scalar(&self, id: TensorId) -> S {
        self.nodes[id.0].data[0]
    }

    fn rank5(&self, op: &'static str, id: TensorId) -> Result<[usize; 5], TensorError> {
        let s = self.shape(id);
        if s.len() != 5 {
            return Err(TensorError::BadRank {
                op,
                expected: 5,
                got: shape_str(s),
            });
        }
        Ok([s[0], s[1], s[2], s[3], s[4]])
    }

    // ── Structural ops ──────────────────────────────────────────────

    /// 3x3x3 same-padded convolution plus bias.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let [n, c, d, h, w] = self.rank5("conv3d", input)?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 5 || ws[2..] != [3, 3, 3] || ws[1] != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: shape_str(&[n, c, d, h, w]),
                rhs: shape_str(&ws),
            });
        }
        let f = ws[0];
        if self.shape(bias) != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d bias",
                lhs: shape_str(&[f]),
                rhs: shape_str(self.shape(bias)),
            });
        }
        let dims = ConvDims {
            batch: n,
            cin: c,
            cout: f,
            d,
            h,
            w,
        };
        let out = kernels::conv3d_forward(self.data(input), self.data(weight), self.data(bias), dims);
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(
            vec![n, f, d, h, w],
            out,
            rg,
            Op::Conv3d {
                input,
                weight,
                bias,
            },
        ))
    }

    /// 2x2x2 max pooling with stride 2.
    pub fn maxpool3d(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let [n, c, d, h, w] = self.rank5("maxpool3d", input)?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddPoolDim {
                dims: shape_str(&[d, h, w]),
            });
        }
        let (out, argmax) = kernels::maxpool3d_forward(self.data(input), n * c, d, h, w);
        let rg = self.requires_grad(input);
        Ok(self.push(
            vec![n, c, d / 2, h / 2, w / 2],
            out,
            rg,
            Op::MaxPool3d { input, argmax },
        ))
    }

    /// Nearest-neighbor x2 upsampling.
    pub fn upsample3d(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let [n, c, d, h, w] = self.rank5("upsample3d", input)?;
        let out = kernels::upsample3d_forward(self.data(input), n * c, d, h, w);
        let rg = self.requires_grad(input);
        Ok(self.push(vec![n, c, 2 * d, 2 * h, 2 * w], out, rg, Op::Upsample3d { input }))
    }

    /// Affine map `input[n,k] . weight[k,m] + bias[m]`.
    pub fn dense(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: shape_str(&is),
                rhs: shape_str(&ws),
            });
        }
        let (n, k, m) = (is[0], is[1], ws[1]);
        if self.shape(bias) != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "dense bias",
                lhs: shape_str(&[m]),
                rhs: shape_str(self.shape(bias)),
            });
        }
        let mut out = kernels::matmul(self.data(input), self.data(weight), n, k, m);
        let bias_data = self.data(bias);
        for row in out.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(bias_data.iter()) {
                *o += b;
            }
        }
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(
            vec![n, m],
            out,
            rg,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Channel-wise global average pooling to `[N, C]`.
    pub fn global_average_pool(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let [n, c, d, h, w] = self.rank5("global_average_pool", input)?;
        let out = kernels::gap_forward(self.data(input), n * c, d * h * w);
        let rg = self.requires_grad(input);
        Ok(self.push(vec![n, c], out, rg, Op::Gap { input }))
    }

    /// Concatenation along the channel axis (axis 1) for rank >= 2 tensors.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() < 2 {
            return Err(TensorError::BadRank {
                op: "concat",
                expected: 2,
                got: shape_str(&first),
            });
        }
        let mut channels = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != first.len()
                || s[0] != first[0]
                || s[2..] != first[2..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: shape_str(&first),
                    rhs: shape_str(s),
                });
            }
            channels += s[1];
        }
        let batch = first[0];
        let inner: usize = first[2..].iter().product();
        let mut out_shape = first.clone();
        out_shape[1] = channels;
        let mut out = vec![S::ZERO; batch * channels * inner];
        for n in 0..batch {
            let mut offset = 0usize;
            for &id in inputs {
                let c = self.shape(id)[1];
                let src = &self.data(id)[n * c * inner..(n + 1) * c * inner];
                out[(n * channels + offset) * inner..(n * channels + offset) * inner + c * inner]
                    .copy_from_slice(src);
                offset += c;
            }
        }
        let rg = inputs.iter().any(|&id| self.requires_grad(id));
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::ConcatC {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Reshape `[N, ...]` to `[N, K]`, keeping the data.
    pub fn flatten(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(input).to_vec();
        if s.is_empty() {
            return Err(TensorError::BadRank {
                op: "flatten",
                expected: 2,
                got: shape_str(&s),
            });
        }
        let n = s[0];
        let k: usize = s[1..].iter().product();
        let data = self.data(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(vec![n, k], data, rg, Op::Flatten { input }))
    }

    /// Inverted dropout: in training mode zeroes each element with probability
    /// `rate` and scales survivors by 1/(1-rate); in eval mode it is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        input: TensorId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadDropoutRate(rate));
        }
        if !training || rate == 0.0 {
            let data = self.data(input).to_vec();
            let shape = self.shape(input).to_vec();
            let rg = self.requires_grad(input);
            return Ok(self.push(
                shape,
                data,
                rg,
                Op::Dropout {
                    input,
                    keep: Vec::new(),
                    scale: 1.0,
                },
            ));
        }
        let scale = 1.0 / (1.0 - rate);
        let scale_s = S::from_f64(scale);
        let keep: Vec<bool> = (0..self.data(input).len())
            .map(|_| rng.random::<f64>() >= rate)
            .collect();
        let data: Vec<S> = self
            .data(input)
            .iter()
            .zip(keep.iter())
            .map(|(&v, &k)| if k { v * scale_s } else { S::ZERO })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(shape, data, rg, Op::Dropout { input, keep, scale }))
    }

    // ── Activations ─────────────────────────────────────────────────

    pub fn activation(&mut self, input: TensorId, act: Activation) -> TensorId {
        match act {
            Activation::Relu => self.relu(input),
            Activation::Elu => self.elu(input),
            Activation::Sigmoid => self.sigmoid(input),
            Activation::Linear => input,
        }
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let data: Vec<S> = self
            .data(input)
            .iter()
            .map(|&v| v.maximum(S::ZERO))
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, rg, Op::Relu { input })
    }

    /// ELU with slope parameter 1.
    pub fn elu(&mut self, input: TensorId) -> TensorId {
        let data: Vec<S> = self
            .data(input)
            .iter()
            .map(|&v| if v > S::ZERO { v } else { v.exp() - S::ONE })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, rg, Op::Elu { input })
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        let data: Vec<S> = self
            .data(input)
            .iter()
            .map(|&v| {
                // overflow-safe in both directions
                if v >= S::ZERO {
                    S::ONE / (S::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (S::ONE + e)
                }
            })
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, rg, Op::Sigmoid { input })
    }

    // ── Elementwise arithmetic ──────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: shape_str(self.shape(a)),
                rhs: shape_str(self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("add", a, b)?;
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, data, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("sub", a, b)?;
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, data, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, data, rg, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("div", a, b)?;
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| x / y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, data, rg, Op::Div { a, b }))
    }

    pub fn add_scalar(&mut self, input: TensorId, c: f64) -> TensorId {
        let cs = S::from_f64(c);
        let data: Vec<S> = self.data(input).iter().map(|&v| v + cs).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, rg, Op::AddScalar { input })
    }

    pub fn mul_scalar(&mut self, input: TensorId, c: f64) -> TensorId {
        let cs = S::from_f64(c);
        let data: Vec<S> = self.data(input).iter().map(|&v| v * cs).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, rg, Op::MulScalar { input, c })
    }

    pub fn neg(&mut self, input: TensorId) -> TensorId {
        self.mul_scalar(input, -1.0)
    }

    pub fn ln(&mut self, input: TensorId) -> TensorId {
        let data: Vec<S> = self.data(input).iter().map(|&v| v.ln()).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, rg, Op::Ln { input })
    }

    pub fn clamp(&mut self, input: TensorId, lo: f64, hi: f64) -> TensorId {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let data: Vec<S> = self.data(input).iter().map(|&v| v.clamped(l, h)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, data, rg, Op::Clamp { input, lo, hi })
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let s = kernels::sum_slice(self.data(input));
        let rg = self.requires_grad(input);
        self.push(vec![1], vec![s], rg, Op::Sum { input })
    }

    pub fn mean(&mut self, input: TensorId) -> TensorId {
        let n = self.data(input).len();
        let s = kernels::sum_slice(self.data(input)) * S::from_f64(1.0 / n as f64);
        let rg = self.requires_grad(input);
        self.push(vec![1], vec![s], rg, Op::Mean { input })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Resets all gradients, seeds `d(loss)/d(loss) = 1` and walks the tape in
    /// reverse. Only nodes with `requires_grad` receive gradient buffers.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape_str(self.shape(loss)),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.apply_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: TensorId) -> &mut [S] {
        let numel = self.nodes[id.0].data.len();
        self.nodes[id.0]
            .grad
            .get_or_insert_with(|| vec![S::ZERO; numel])
    }

    fn accumulate(&mut self, id: TensorId, delta: &[S]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let g = self.ensure_grad(id);
        for (a, &b) in g.iter_mut().zip(delta.iter()) {
            *a += b;
        }
    }

    fn apply_backward(&mut self, i: usize, grad: &[S]) {
        // ops are moved out and back to appease the borrow checker cheaply
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                weight,
                bias,
            } => {
                let [n, c, d, h, w]: [usize; 5] = self.shape(*input).try_into().unwrap();
                let f = self.shape(*weight)[0];
                let dims = ConvDims {
                    batch: n,
                    cin: c,
                    cout: f,
                    d,
                    h,
                    w,
                };
                let (gin, gw, gb) = kernels::conv3d_backward(
                    grad,
                    self.data(*input),
                    self.data(*weight),
                    dims,
                    self.requires_grad(*input),
                );
                if let Some(gin) = gin {
                    self.accumulate(*input, &gin);
                }
                self.accumulate(*weight, &gw);
                self.accumulate(*bias, &gb);
            }
            Op::MaxPool3d { input, argmax } => {
                let [n, c, d, h, w]: [usize; 5] = self.shape(*input).try_into().unwrap();
                let out_plane = (d / 2) * (h / 2) * (w / 2);
                let gin = kernels::maxpool3d_grad(grad, argmax, n * c, d * h * w, out_plane);
                self.accumulate(*input, &gin);
            }
            Op::Upsample3d { input } => {
                let [n, c, d, h, w]: [usize; 5] = self.shape(*input).try_into().unwrap();
                let gin = kernels::upsample3d_grad(grad, n * c, d, h, w);
                self.accumulate(*input, &gin);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (n, k) = (self.shape(*input)[0], self.shape(*input)[1]);
                let m = self.shape(*weight)[1];
                let (da, dw) =
                    kernels::matmul_grads(grad, self.data(*input), self.data(*weight), n, k, m);
                if self.requires_grad(*input) {
                    self.accumulate(*input, &da);
                }
                self.accumulate(*weight, &dw);
                if self.requires_grad(*bias) {
                    let mut db = vec![S::ZERO; m];
                    for row in grad.chunks(m) {
                        for (o, &g) in db.iter_mut().zip(row.iter()) {
                            *o += g;
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Relu { input } => {
                let dg: Vec<S> = grad
                    .iter()
                    .zip(self.data(*input).iter())
                    .map(|(&g, &x)| if x > S::ZERO { g } else { S::ZERO })
                    .collect();
                self.accumulate(*input, &dg);
            }
            Op::Elu { input } => {
                let out = &self.nodes[i].data;
                let dg: Vec<S> = grad
                    .iter()
                    .zip(self.data(*input).iter().zip(out.iter()))
                    .map(|(&g, (&x, &y))| if x > S::ZERO { g } else { g * (y + S::ONE) })
                    .collect();
                self.accumulate(*input, &dg);
            }
            Op::Sigmoid { input } => {
                let out = &self.nodes[i].data;
                let dg: Vec<S> = grad
                    .iter()
                    .zip(out.iter())
                    .map(|(&g, &s)| g * s * (S::ONE - s))
                    .collect();
                self.accumulate(*input, &dg);
            }
            Op::Gap { input } => {
                let [n, c, d, h, w]: [usize; 5] = self.shape(*input).try_into().unwrap();
                let gin = kernels::gap_grad(grad, n * c, d * h * w);
                self.accumulate(*input, &gin);
            }
            Op::ConcatC { inputs } => {
                let out_shape = self.shape(TensorId(i)).to_vec();
                let batch = out_shape[0];
                let inner: usize = out_shape[2..].iter().product();
                let channels = out_shape[1];
                let mut offset = 0usize;
                for &id in inputs {
                    let c = self.shape(id)[1];
                    if self.requires_grad(id) {
                        let mut dg = vec![S::ZERO; batch * c * inner];
                        for n in 0..batch {
                            let src = &grad[(n * channels + offset) * inner
                                ..(n * channels + offset) * inner + c * inner];
                            dg[n * c * inner..(n + 1) * c * inner].copy_from_slice(src);
                        }
                        self.accumulate(id, &dg);
                    }
                    offset += c;
                }
            }
            Op::Flatten { input } => {
                self.accumulate(*input, grad);
            }
            Op::Dropout { input, keep, scale } => {
                if keep.is_empty() {
                    self.accumulate(*input, grad);
                } else {
                    let s = S::from_f64(*scale);
                    let dg: Vec<S> = grad
                        .iter()
                        .zip(keep.iter())
                        .map(|(&g, &k)| if k { g * s } else { S::ZERO })
                        .collect();
                    self.accumulate(*input, &dg);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, grad);
                let dg: Vec<S> = grad.iter().map(|&g| -g).collect();
                self.accumulate(*b, &dg);
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let dg: Vec<S> = grad
                        .iter()
                        .zip(self.data(*b).iter())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accumulate(*a, &dg);
                }
                if self.requires_grad(*b) {
                    let dg: Vec<S> = grad
                        .iter()
                        .zip(self.data(*a).iter())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accumulate(*b, &dg);
                }
            }
            Op::Div { a, b } => {
                if self.requires_grad(*a) {
                    let dg: Vec<S> = grad
                        .iter()
                        .zip(self.data(*b).iter())
                        .map(|(&g, &v)| g / v)
                        .collect();
                    self.accumulate(*a, &dg);
                }
                if self.requires_grad(*b) {
                    let dg: Vec<S> = grad
                        .iter()
                        .zip(self.data(*a).iter().zip(self.data(*b).iter()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(*b, &dg);
                }
            }
            Op::AddScalar { input } => {
                self.accumulate(*input, grad);
            }
            Op::MulScalar { input, c } => {
                let cs = S::from_f64(*c);
                let dg: Vec<S> = grad.iter().map(|&g| g * cs).collect();
                self.accumulate(*input, &dg);
            }
            Op::Ln { input } => {
                let dg: Vec<S> = grad
                    .iter()
                    .zip(self.data(*input).iter())
                    .map(|(&g, &x)| g / x)
                    .collect();
                self.accumulate(*input, &dg);
            }
            Op::Clamp { input, lo, hi } => {
                let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
                let dg: Vec<S> = grad
                    .iter()
                    .zip(self.data(*input).iter())
                    .map(|(&g, &x)| if x > l && x < h { g } else { S::ZERO })
                    .collect();
                self.accumulate(*input, &dg);
            }
            Op::Sum { input } => {
                let n = self.nodes[input.0].data.len();
                let dg = vec![grad[0]; n];
                self.accumulate(*input, &dg);
            }
            Op::Mean { input } => {
                let n = self.nodes[input.0].data.len();
                let dg = vec![grad[0] * S::from_f64(1.0 / n as f64); n];
                self.accumulate(*input, &dg);
            }
        }
        self.ops[i] = op;
    }
}
