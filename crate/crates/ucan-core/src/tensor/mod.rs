//! A small reverse-mode automatic differentiation engine over `f64`
//! ndarrays.
//!
//! Every training step builds a fresh [`Tape`]: leaves are inserted for
//! inputs and parameters, ops append nodes, and [`Tape::backward`] walks the
//! record in reverse accumulating gradients. Reduction orders inside every
//! kernel are fixed, so identical inputs produce bit-identical values and
//! gradients — the property the resume/determinism contracts lean on.

mod conv;
mod resample;

use ndarray::{ArrayD, Axis, IxDyn};

pub use conv::{conv3d_backward, conv3d_forward, conv_out_len};
pub use resample::{upsample2x_backward, upsample2x_forward};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d {
        input: Node,
        weight: Node,
        bias: Option<Node>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        input: Node,
        gamma: Node,
        beta: Node,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        input: Node,
    },
    LeakyRelu {
        input: Node,
        slope: f64,
    },
    Tanh {
        input: Node,
    },
    Sigmoid {
        input: Node,
    },
    Add {
        a: Node,
        b: Node,
    },
    MaxElem {
        a: Node,
        b: Node,
    },
    ConcatChannels {
        parts: Vec<Node>,
    },
    Upsample2x {
        input: Node,
    },
    GlobalAvgPool {
        input: Node,
    },
    Linear {
        input: Node,
        weight: Node,
        bias: Node,
    },
    ScaleChannels {
        input: Node,
        gates: Node,
    },
    ScaleSpatial {
        input: Node,
        gate: Node,
    },
    MeanAbsDiff {
        a: Node,
        b: Node,
    },
    LogClamped {
        input: Node,
        eps: f64,
    },
    OneMinus {
        input: Node,
    },
    MeanAll {
        input: Node,
    },
    CrossEntropyLogits {
        logits: Node,
        target: usize,
    },
    WeightedSum {
        parts: Vec<(Node, f64)>,
    },
}

/// Append-only record of a forward computation.
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    grads: Vec<Option<ArrayD<f64>>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires: bool) -> Node {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        Node(self.values.len() - 1)
    }

    fn req(&self, n: Node) -> bool {
        self.requires[n.0]
    }

    pub fn value(&self, n: Node) -> &ArrayD<f64> {
        &self.values[n.0]
    }

    /// Value of a scalar (single-element) node.
    pub fn scalar(&self, n: Node) -> f64 {
        let v = &self.values[n.0];
        debug_assert_eq!(v.len(), 1);
        v.as_slice().unwrap()[0]
    }

    /// Gradient accumulated into `n` by the last `backward` call.
    pub fn grad(&self, n: Node) -> Option<&ArrayD<f64>> {
        self.grads[n.0].as_ref()
    }

    pub fn shape(&self, n: Node) -> &[usize] {
        self.values[n.0].shape()
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> Node {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Node {
        self.leaf(value, false)
    }

    // ---- ops ----

    pub fn conv3d(
        &mut self,
        input: Node,
        weight: Node,
        bias: Option<Node>,
        stride: usize,
        pad: usize,
    ) -> Node {
        let value = conv3d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        );
        let requires =
            self.req(input) || self.req(weight) || bias.is_some_and(|b| self.req(b));
        self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            requires,
        )
    }

    /// Per-channel normalization over the spatial axes with affine scale
    /// and shift: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn instance_norm(&mut self, input: Node, gamma: Node, beta: Node, eps: f64) -> Node {
        let x = self.value(input);
        assert_eq!(x.ndim(), 4, "instance_norm input must be (C, D, H, W)");
        let c = x.shape()[0];
        let n = x.len() / c;
        let xs = x.as_slice().unwrap();
        let gs = self.value(gamma).as_slice().unwrap();
        let bs = self.value(beta).as_slice().unwrap();
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; x.len()];
        for ci in 0..c {
            let chunk = &xs[ci * n..(ci + 1) * n];
            let m: f64 = chunk.iter().sum::<f64>() / n as f64;
            let var: f64 = chunk.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[ci] = m;
            inv_std[ci] = is;
            let (g, b) = (gs[ci], bs[ci]);
            for (o, &v) in out[ci * n..(ci + 1) * n].iter_mut().zip(chunk) {
                *o = g * (v - m) * is + b;
            }
        }
        let requires = self.req(input) || self.req(gamma) || self.req(beta);
        let value = ArrayD::from_shape_vec(x.raw_dim(), out).unwrap();
        self.push(
            value,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            },
            requires,
        )
    }

    pub fn relu(&mut self, input: Node) -> Node {
        let value = self.value(input).mapv(|v| v.max(0.0));
        let requires = self.req(input);
        self.push(value, Op::Relu { input }, requires)
    }

    pub fn leaky_relu(&mut self, input: Node, slope: f64) -> Node {
        let value = self.value(input).mapv(|v| if v > 0.0 { v } else { slope * v });
        let requires = self.req(input);
        self.push(value, Op::LeakyRelu { input, slope }, requires)
    }

    pub fn tanh(&mut self, input: Node) -> Node {
        let value = self.value(input).mapv(f64::tanh);
        let requires = self.req(input);
        self.push(value, Op::Tanh { input }, requires)
    }

    pub fn sigmoid(&mut self, input: Node) -> Node {
        let value = self.value(input).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let requires = self.req(input);
        self.push(value, Op::Sigmoid { input }, requires)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let requires = self.req(a) || self.req(b);
        self.push(value, Op::Add { a, b }, requires)
    }

    /// Element-wise maximum; ties route their gradient to `a`.
    pub fn max_elem(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.shape(a), self.shape(b), "max shape mismatch");
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.max(y));
        let requires = self.req(a) || self.req(b);
        self.push(value, Op::MaxElem { a, b }, requires)
    }

    pub fn concat_channels(&mut self, parts: &[Node]) -> Node {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat shape mismatch");
        let requires = parts.iter().any(|&p| self.req(p));
        self.push(
            value,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            requires,
        )
    }

    pub fn upsample2x(&mut self, input: Node) -> Node {
        let value = upsample2x_forward(self.value(input));
        let requires = self.req(input);
        self.push(value, Op::Upsample2x { input }, requires)
    }

    /// `(C, D, H, W) -> (C,)` mean over the spatial axes.
    pub fn global_avg_pool(&mut self, input: Node) -> Node {
        let x = self.value(input);
        let c = x.shape()[0];
        let n = x.len() / c;
        let xs = x.as_slice().unwrap();
        let pooled: Vec<f64> = (0..c)
            .map(|ci| xs[ci * n..(ci + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let requires = self.req(input);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[c]), pooled).unwrap(),
            Op::GlobalAvgPool { input },
            requires,
        )
    }

    /// Dense layer on 1-D vectors: `y = W x + b` with `W: (out, in)`.
    pub fn linear(&mut self, input: Node, weight: Node, bias: Node) -> Node {
        let x = self.value(input).as_slice().unwrap();
        let w = self.value(weight);
        let b = self.value(bias).as_slice().unwrap();
        let (o, i) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.len(), i, "linear input width");
        let ws = w.as_slice().unwrap();
        let out: Vec<f64> = (0..o)
            .map(|r| {
                b[r] + ws[r * i..(r + 1) * i]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        let requires = self.req(input) || self.req(weight) || self.req(bias);
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[o]), out).unwrap(),
            Op::Linear {
                input,
                weight,
                bias,
            },
            requires,
        )
    }

    /// Scales each channel of a `(C, D, H, W)` map by a `(C,)` gate vector.
    pub fn scale_channels(&mut self, input: Node, gates: Node) -> Node {
        let x = self.value(input);
        let g = self.value(gates).as_slice().unwrap();
        let c = x.shape()[0];
        assert_eq!(g.len(), c, "gate count");
        let n = x.len() / c;
        let xs = x.as_slice().unwrap();
        let mut out = vec![0.0; x.len()];
        for ci in 0..c {
            for (o, &v) in out[ci * n..(ci + 1) * n].iter_mut().zip(&xs[ci * n..(ci + 1) * n]) {
                *o = v * g[ci];
            }
        }
        let requires = self.req(input) || self.req(gates);
        self.push(
            ArrayD::from_shape_vec(x.raw_dim(), out).unwrap(),
            Op::ScaleChannels { input, gates },
            requires,
        )
    }

    /// Scales every channel of a `(C, D, H, W)` map by a `(1, D, H, W)` gate.
    pub fn scale_spatial(&mut self, input: Node, gate: Node) -> Node {
        let x = self.value(input);
        let g = self.value(gate);
        let c = x.shape()[0];
        let n = x.len() / c;
        assert_eq!(g.len(), n, "spatial gate size");
        let xs = x.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let mut out = vec![0.0; x.len()];
        for ci in 0..c {
            for ((o, &v), &gv) in out[ci * n..(ci + 1) * n]
                .iter_mut()
                .zip(&xs[ci * n..(ci + 1) * n])
                .zip(gs)
            {
                *o = v * gv;
            }
        }
        let requires = self.req(input) || self.req(gate);
        self.push(
            ArrayD::from_shape_vec(x.raw_dim(), out).unwrap(),
            Op::ScaleSpatial { input, gate },
            requires,
        )
    }

    /// Scalar node: mean absolute difference between two same-shape tensors.
    pub fn mean_abs_diff(&mut self, a: Node, b: Node) -> Node {
        assert_eq!(self.shape(a), self.shape(b), "mean_abs_diff shape mismatch");
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let requires = self.req(a) || self.req(b);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s / n),
            Op::MeanAbsDiff { a, b },
            requires,
        )
    }

    /// Element-wise `ln(clamp(x, eps, 1 - eps))`; clamped entries get zero
    /// gradient.
    pub fn log_clamped(&mut self, input: Node, eps: f64) -> Node {
        let value = self.value(input).mapv(|v| v.clamp(eps, 1.0 - eps).ln());
        let requires = self.req(input);
        self.push(value, Op::LogClamped { input, eps }, requires)
    }

    pub fn one_minus(&mut self, input: Node) -> Node {
        let value = self.value(input).mapv(|v| 1.0 - v);
        let requires = self.req(input);
        self.push(value, Op::OneMinus { input }, requires)
    }

    /// Scalar node: mean over all elements.
    pub fn mean_all(&mut self, input: Node) -> Node {
        let m = self.value(input).mean().unwrap();
        let requires = self.req(input);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), m),
            Op::MeanAll { input },
            requires,
        )
    }

    /// Scalar node: `-log softmax(logits)[target]`, computed stably.
    pub fn cross_entropy_logits(&mut self, logits: Node, target: usize) -> Node {
        let l = self.value(logits).as_slice().unwrap();
        assert!(target < l.len(), "class target out of range");
        let m = l.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + l.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let requires = self.req(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), lse - l[target]),
            Op::CrossEntropyLogits { logits, target },
            requires,
        )
    }

    /// Scalar node: weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, parts: &[(Node, f64)]) -> Node {
        let s: f64 = parts.iter().map(|&(n, w)| self.scalar(n) * w).sum();
        let requires = parts.iter().any(|&(n, _)| self.req(n));
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::WeightedSum {
                parts: parts.to_vec(),
            },
            requires,
        )
    }

    // ---- backward ----

    fn accum(&mut self, n: Node, delta: ArrayD<f64>) {
        match &mut self.grads[n.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulates `d loss / d node` into every recorded node that
    /// requires gradients. `loss` must be scalar.
    pub fn backward(&mut self, loss: Node) {
        assert_eq!(self.values[loss.0].len(), 1, "backward needs a scalar loss");
        assert!(
            self.requires[loss.0],
            "loss does not depend on any trainable leaf"
        );
        self.grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..self.ops.len()).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            let gout = self.grads[i].clone().unwrap();
            let op = self.ops[i].clone();
            match op {
                Op::Leaf => {}
                Op::Conv3d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let need_gb = bias.is_some_and(|b| self.req(b));
                    let grads = conv3d_backward(
                        &self.values[input.0],
                        &self.values[weight.0],
                        &gout,
                        stride,
                        pad,
                        self.req(input),
                        self.req(weight),
                        need_gb,
                    );
                    if let Some(gx) = grads.gx {
                        self.accum(input, gx);
                    }
                    if let Some(gw) = grads.gw {
                        self.accum(weight, gw);
                    }
                    if let (Some(gb), Some(b)) = (grads.gb, bias) {
                        self.accum(b, gb);
                    }
                }
                Op::InstanceNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let x = &self.values[input.0];
                    let c = x.shape()[0];
                    let n = x.len() / c;
                    let xs = x.as_slice().unwrap();
                    let gs = gout.as_slice().unwrap();
                    let gammas = self.values[gamma.0].as_slice().unwrap();
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    let mut gx = vec![0.0; x.len()];
                    for ci in 0..c {
                        let (m, is) = (mean[ci], inv_std[ci]);
                        let xc = &xs[ci * n..(ci + 1) * n];
                        let gc = &gs[ci * n..(ci + 1) * n];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for (&g, &v) in gc.iter().zip(xc) {
                            let xhat = (v - m) * is;
                            sum_g += g;
                            sum_gx += g * xhat;
                        }
                        ggamma[ci] = sum_gx;
                        gbeta[ci] = sum_g;
                        if self.req(input) {
                            let nf = n as f64;
                            let k = gammas[ci] * is;
                            for ((o, &g), &v) in
                                gx[ci * n..(ci + 1) * n].iter_mut().zip(gc).zip(xc)
                            {
                                let xhat = (v - m) * is;
                                *o = k * (g - sum_g / nf - xhat * sum_gx / nf);
                            }
                        }
                    }
                    if self.req(input) {
                        self.accum(input, ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap());
                    }
                    if self.req(gamma) {
                        self.accum(
                            gamma,
                            ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap(),
                        );
                    }
                    if self.req(beta) {
                        self.accum(beta, ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap());
                    }
                }
                Op::Relu { input } => {
                    let mut gx = gout;
                    gx.zip_mut_with(&self.values[i], |g, &y| {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    self.accum(input, gx);
                }
                Op::LeakyRelu { input, slope } => {
                    let mut gx = gout;
                    gx.zip_mut_with(&self.values[i], |g, &y| {
                        if y <= 0.0 {
                            *g *= slope;
                        }
                    });
                    self.accum(input, gx);
                }
                Op::Tanh { input } => {
                    let mut gx = gout;
                    gx.zip_mut_with(&self.values[i], |g, &y| *g *= 1.0 - y * y);
                    self.accum(input, gx);
                }
                Op::Sigmoid { input } => {
                    let mut gx = gout;
                    gx.zip_mut_with(&self.values[i], |g, &y| *g *= y * (1.0 - y));
                    self.accum(input, gx);
                }
                Op::Add { a, b } => {
                    if self.req(a) {
                        self.accum(a, gout.clone());
                    }
                    if self.req(b) {
                        self.accum(b, gout);
                    }
                }
                Op::MaxElem { a, b } => {
                    // Ties route to `a`: the winner is wherever out == a.
                    let mask_a: Vec<f64> = self.values[a.0]
                        .iter()
                        .zip(self.values[i].iter())
                        .map(|(&x, &o)| if x == o { 1.0 } else { 0.0 })
                        .collect();
                    if self.req(a) {
                        let mut ga = gout.clone();
                        for (g, &m) in ga.iter_mut().zip(&mask_a) {
                            *g *= m;
                        }
                        self.accum(a, ga);
                    }
                    if self.req(b) {
                        let mut gb = gout;
                        for (g, &m) in gb.iter_mut().zip(&mask_a) {
                            *g *= 1.0 - m;
                        }
                        self.accum(b, gb);
                    }
                }
                Op::ConcatChannels { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let c = self.values[p.0].shape()[0];
                        if self.req(p) {
                            let slice = gout
                                .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + c))
                                .to_owned();
                            self.accum(p, slice);
                        }
                        offset += c;
                    }
                }
                Op::Upsample2x { input } => {
                    let gx = upsample2x_backward(self.values[input.0].shape(), &gout);
                    self.accum(input, gx);
                }
                Op::GlobalAvgPool { input } => {
                    let x = &self.values[input.0];
                    let c = x.shape()[0];
                    let n = x.len() / c;
                    let gs = gout.as_slice().unwrap();
                    let mut gx = vec![0.0; x.len()];
                    for ci in 0..c {
                        let v = gs[ci] / n as f64;
                        gx[ci * n..(ci + 1) * n].fill(v);
                    }
                    self.accum(input, ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap());
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let x = self.values[input.0].as_slice().unwrap().to_vec();
                    let w = self.values[weight.0].clone();
                    let (o, icnt) = (w.shape()[0], w.shape()[1]);
                    let ws = w.as_slice().unwrap();
                    let gs = gout.as_slice().unwrap();
                    if self.req(weight) {
                        let mut gw = vec![0.0; o * icnt];
                        for r in 0..o {
                            for ci in 0..icnt {
                                gw[r * icnt + ci] = gs[r] * x[ci];
                            }
                        }
                        self.accum(
                            weight,
                            ArrayD::from_shape_vec(IxDyn(&[o, icnt]), gw).unwrap(),
                        );
                    }
                    if self.req(bias) {
                        self.accum(
                            bias,
                            ArrayD::from_shape_vec(IxDyn(&[o]), gs.to_vec()).unwrap(),
                        );
                    }
                    if self.req(input) {
                        let gx: Vec<f64> = (0..icnt)
                            .map(|ci| (0..o).map(|r| ws[r * icnt + ci] * gs[r]).sum())
                            .collect();
                        self.accum(input, ArrayD::from_shape_vec(IxDyn(&[icnt]), gx).unwrap());
                    }
                }
                Op::ScaleChannels { input, gates } => {
                    let (gx_arr, gg_arr) = {
                        let x = &self.values[input.0];
                        let c = x.shape()[0];
                        let n = x.len() / c;
                        let gs = gout.as_slice().unwrap();
                        let gatev = self.values[gates.0].as_slice().unwrap();
                        let xs = x.as_slice().unwrap();
                        let gx = self.req(input).then(|| {
                            let mut gx = vec![0.0; x.len()];
                            for ci in 0..c {
                                for (o, &g) in gx[ci * n..(ci + 1) * n]
                                    .iter_mut()
                                    .zip(&gs[ci * n..(ci + 1) * n])
                                {
                                    *o = g * gatev[ci];
                                }
                            }
                            ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap()
                        });
                        let gg = self.req(gates).then(|| {
                            let gg: Vec<f64> = (0..c)
                                .map(|ci| {
                                    gs[ci * n..(ci + 1) * n]
                                        .iter()
                                        .zip(&xs[ci * n..(ci + 1) * n])
                                        .map(|(a, b)| a * b)
                                        .sum()
                                })
                                .collect();
                            ArrayD::from_shape_vec(IxDyn(&[c]), gg).unwrap()
                        });
                        (gx, gg)
                    };
                    if let Some(gx) = gx_arr {
                        self.accum(input, gx);
                    }
                    if let Some(gg) = gg_arr {
                        self.accum(gates, gg);
                    }
                }
                Op::ScaleSpatial { input, gate } => {
                    let (gx_arr, gg_arr) = {
                        let x = &self.values[input.0];
                        let c = x.shape()[0];
                        let n = x.len() / c;
                        let gs = gout.as_slice().unwrap();
                        let gatev = self.values[gate.0].as_slice().unwrap();
                        let xs = x.as_slice().unwrap();
                        let gx = self.req(input).then(|| {
                            let mut gx = vec![0.0; x.len()];
                            for ci in 0..c {
                                for ((o, &g), &t) in gx[ci * n..(ci + 1) * n]
                                    .iter_mut()
                                    .zip(&gs[ci * n..(ci + 1) * n])
                                    .zip(gatev)
                                {
                                    *o = g * t;
                                }
                            }
                            ArrayD::from_shape_vec(x.raw_dim(), gx).unwrap()
                        });
                        let gg = self.req(gate).then(|| {
                            let mut gg = vec![0.0; n];
                            for ci in 0..c {
                                for ((o, &g), &v) in gg
                                    .iter_mut()
                                    .zip(&gs[ci * n..(ci + 1) * n])
                                    .zip(&xs[ci * n..(ci + 1) * n])
                                {
                                    *o += g * v;
                                }
                            }
                            let shape = self.values[gate.0].raw_dim();
                            ArrayD::from_shape_vec(shape, gg).unwrap()
                        });
                        (gx, gg)
                    };
                    if let Some(gx) = gx_arr {
                        self.accum(input, gx);
                    }
                    if let Some(gg) = gg_arr {
                        self.accum(gate, gg);
                    }
                }
                Op::MeanAbsDiff { a, b } => {
                    let g = gout.as_slice().unwrap()[0];
                    let n = self.values[a.0].len() as f64;
                    let mut d = self.values[a.0].clone();
                    d.zip_mut_with(&self.values[b.0], |x, &y| {
                        *x = g * (*x - y).signum() / n;
                    });
                    // f64::signum(±0) is ±1; ties need the 0 subgradient.
                    let av = &self.values[a.0];
                    let bv = &self.values[b.0];
                    for ((dv, &x), &y) in d.iter_mut().zip(av.iter()).zip(bv.iter()) {
                        if x == y {
                            *dv = 0.0;
                        }
                    }
                    if self.req(a) {
                        self.accum(a, d.clone());
                    }
                    if self.req(b) {
                        self.accum(b, d.mapv(|v| -v));
                    }
                }
                Op::LogClamped { input, eps } => {
                    let mut gx = gout;
                    gx.zip_mut_with(&self.values[input.0], |g, &x| {
                        if x <= eps || x >= 1.0 - eps {
                            *g = 0.0;
                        } else {
                            *g /= x;
                        }
                    });
                    self.accum(input, gx);
                }
                Op::OneMinus { input } => {
                    self.accum(input, gout.mapv(|v| -v));
                }
                Op::MeanAll { input } => {
                    let g = gout.as_slice().unwrap()[0];
                    let shape = self.values[input.0].raw_dim();
                    let n = self.values[input.0].len() as f64;
                    self.accum(input, ArrayD::from_elem(shape, g / n));
                }
                Op::CrossEntropyLogits { logits, target } => {
                    let g = gout.as_slice().unwrap()[0];
                    let l = self.values[logits.0].as_slice().unwrap();
                    let m = l.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let exps: Vec<f64> = l.iter().map(|&v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let gl: Vec<f64> = exps
                        .iter()
                        .enumerate()
                        .map(|(j, &e)| g * (e / z - if j == target { 1.0 } else { 0.0 }))
                        .collect();
                    self.accum(
                        logits,
                        ArrayD::from_shape_vec(IxDyn(&[l.len()]), gl).unwrap(),
                    );
                }
                Op::WeightedSum { parts } => {
                    let g = gout.as_slice().unwrap()[0];
                    for (p, w) in parts {
                        if self.req(p) {
                            self.accum(p, ArrayD::from_elem(IxDyn(&[1]), g * w));
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of d(loss)/d(inputs[0]) for an arbitrary
    /// tape program. `build` must be a pure function of the leaves.
    fn fd_check(inputs: &[ArrayD<f64>], build: impl Fn(&mut Tape, &[Node]) -> Node) {
        let run = |ins: &[ArrayD<f64>]| -> (f64, Vec<Option<ArrayD<f64>>>) {
            let mut tape = Tape::new();
            let leaves: Vec<Node> = ins.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let loss = build(&mut tape, &leaves);
            let val = tape.scalar(loss);
            tape.backward(loss);
            let grads = leaves.iter().map(|&l| tape.grad(l).cloned()).collect();
            (val, grads)
        };
        let (_, grads) = run(inputs);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (which, input) in inputs.iter().enumerate() {
            let g = grads[which].as_ref().expect("leaf got a gradient");
            for _ in 0..8 {
                let idx = rng.gen_range(0..input.len());
                let h = 1e-6 * input.as_slice().unwrap()[idx].abs().max(1.0);
                let mut plus = inputs.to_vec();
                plus[which].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[which].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let analytic = g.as_slice().unwrap()[idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-7);
                assert!(
                    ((analytic - numeric) / denom).abs() < 2e-4,
                    "input {which} idx {idx}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn instance_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, &[3, 4, 4, 4]);
        let gamma = randn(&mut rng, &[3]);
        let beta = randn(&mut rng, &[3]);
        let target = randn(&mut rng, &[3, 4, 4, 4]);
        fd_check(&[x, gamma, beta], |t, l| {
            let y = t.instance_norm(l[0], l[1], l[2], 1e-5);
            let tgt = t.constant(target.clone());
            t.mean_abs_diff(y, tgt)
        });
    }

    #[test]
    fn se_chain_gradients() {
        // pool -> linear -> relu -> linear -> sigmoid -> channel scale
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[4, 3, 3, 3]);
        let w1 = randn(&mut rng, &[2, 4]);
        let b1 = randn(&mut rng, &[2]);
        let w2 = randn(&mut rng, &[4, 2]);
        let b2 = randn(&mut rng, &[4]);
        let target = randn(&mut rng, &[4, 3, 3, 3]);
        fd_check(&[x, w1, b1, w2, b2], |t, l| {
            let pooled = t.global_avg_pool(l[0]);
            let h = t.linear(pooled, l[1], l[2]);
            let h = t.relu(h);
            let h = t.linear(h, l[3], l[4]);
            let gates = t.sigmoid(h);
            let y = t.scale_channels(l[0], gates);
            let tgt = t.constant(target.clone());
            t.mean_abs_diff(y, tgt)
        });
    }

    #[test]
    fn spatial_gate_and_max_fusion_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[3, 4, 2, 4]);
        let gate_w = randn(&mut rng, &[1, 3, 1, 1, 1]);
        let gate_b = randn(&mut rng, &[1]);
        let target = randn(&mut rng, &[3, 4, 2, 4]);
        fd_check(&[x, gate_w, gate_b], |t, l| {
            let raw = t.conv3d(l[0], l[1], Some(l[2]), 1, 0);
            let gate = t.sigmoid(raw);
            let sse = t.scale_spatial(l[0], gate);
            let rel = t.relu(l[0]);
            let fused = t.max_elem(sse, rel);
            let tgt = t.constant(target.clone());
            t.mean_abs_diff(fused, tgt)
        });
    }

    #[test]
    fn conv_norm_act_upsample_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 4, 4, 4]);
        let w = randn(&mut rng, &[3, 2, 3, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let gamma = randn(&mut rng, &[3]);
        let beta = randn(&mut rng, &[3]);
        let target = randn(&mut rng, &[3, 8, 8, 8]);
        fd_check(&[x, w, b, gamma, beta], |t, l| {
            let y = t.conv3d(l[0], l[1], Some(l[2]), 1, 1);
            let y = t.instance_norm(y, l[3], l[4], 1e-5);
            let y = t.leaky_relu(y, 0.2);
            let y = t.upsample2x(y);
            let tgt = t.constant(target.clone());
            t.mean_abs_diff(y, tgt)
        });
    }

    #[test]
    fn adversarial_composite_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Raw pre-sigmoid score maps for "real" and "fake".
        let real = randn(&mut rng, &[1, 3, 3, 3]);
        let fake = randn(&mut rng, &[1, 3, 3, 3]);
        fd_check(&[real, fake], |t, l| {
            let d_real = t.sigmoid(l[0]);
            let d_fake = t.sigmoid(l[1]);
            let log_real = t.log_clamped(d_real, 1e-7);
            let one_minus_fake = t.one_minus(d_fake);
            let log_omf = t.log_clamped(one_minus_fake, 1e-7);
            let m1 = t.mean_all(log_real);
            let m2 = t.mean_all(log_omf);
            t.weighted_sum(&[(m1, -1.0), (m2, -1.0)])
        });
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = randn(&mut rng, &[3]);
        fd_check(&[logits], |t, l| t.cross_entropy_logits(l[0], 2));
    }

    #[test]
    fn concat_add_tanh_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[2, 2, 2, 2]);
        let b = randn(&mut rng, &[3, 2, 2, 2]);
        let target = randn(&mut rng, &[5, 2, 2, 2]);
        fd_check(&[a, b], |t, l| {
            let cat = t.concat_channels(&[l[0], l[1]]);
            let y = t.tanh(cat);
            let y2 = t.add(y, cat);
            let tgt = t.constant(target.clone());
            t.mean_abs_diff(y2, tgt)
        });
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[2, 2, 2, 2]);
        let w = randn(&mut rng, &[2, 2, 3, 3, 3]);
        let mut tape = Tape::new();
        let xl = tape.leaf(x, true);
        let wl = tape.leaf(w, false); // frozen
        let y = tape.conv3d(xl, wl, None, 1, 1);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        assert!(tape.grad(xl).is_some());
        assert!(tape.grad(wl).is_none());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[2, 4, 4, 4]);
        let w = randn(&mut rng, &[2, 2, 3, 3, 3]);
        let run = || {
            let mut t = Tape::new();
            let xl = t.leaf(x.clone(), true);
            let wl = t.leaf(w.clone(), true);
            let y = t.conv3d(xl, wl, None, 1, 1);
            let y = t.tanh(y);
            let loss = t.mean_all(y);
            t.backward(loss);
            (t.scalar(loss), t.grad(wl).unwrap().clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.iter().zip(g2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
