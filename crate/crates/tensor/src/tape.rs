use crate::conv::{self, conv_output_size, ConvGeom};
use crate::error::{shape_err, Result, TensorError};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Abs,
    Square,
    Sqrt,
    Log,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(usize, Unary),
    Binary(usize, usize, Binary),
    Sum(usize),
    Mean(usize),
    SumChannels(usize),
    MeanPerSample(usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    AvgPool2d {
        x: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    ChannelBias {
        x: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward pass is a single reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// (outer, dim, inner) strides of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, contrib: Vec<T>) {
    match &mut grads[idx] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor. Only leaves with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).data()[0].as_f64()
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Neg => Box::new(|v| -v),
            Unary::Relu => Box::new(|v| v.max(0.0)),
            Unary::LeakyRelu(s) => Box::new(move |v| if v > 0.0 { v } else { s * v }),
            Unary::Sigmoid => Box::new(|v| 1.0 / (1.0 + (-v).exp())),
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Abs => Box::new(f64::abs),
            Unary::Square => Box::new(|v| v * v),
            Unary::Sqrt => Box::new(f64::sqrt),
            Unary::Log => Box::new(f64::ln),
            Unary::Scale(k) => Box::new(move |v| k * v),
            Unary::AddScalar(k) => Box::new(move |v| v + k),
            Unary::Clamp(lo, hi) => Box::new(move |v| v.max(lo).min(hi)),
        };
        let value = self.value(x).map(|v| T::of(f(v.as_f64())));
        let rg = self.requires_grad(x);
        self.push(value, Op::Unary(x.0, kind), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Unary::Scale(k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Unary::AddScalar(k))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "elementwise",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Binary(a.0, b.0, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum_f64() / v.len().max(1) as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(T::of(s)), Op::Mean(x.0), rg)
    }

    /// Sums over axis 1 of a 4-D tensor, keeping a singleton channel axis.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        let hw = h * w;
        let mut acc = vec![0.0f64; b * hw];
        for bi in 0..b {
            for ci in 0..c {
                let src = &v.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (a, s) in acc[bi * hw..(bi + 1) * hw].iter_mut().zip(src) {
                    *a += s.as_f64();
                }
            }
        }
        let value = Tensor::from_vec(&[b, 1, h, w], acc.into_iter().map(T::of).collect())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::SumChannels(x.0), rg))
    }

    /// Mean over every axis but the first: `[B, ...] -> [B]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let b = *v
            .shape()
            .first()
            .ok_or_else(|| shape_err("mean_per_sample", "0-D input"))?;
        let per = if b == 0 { 0 } else { v.len() / b };
        let data = v
            .data()
            .chunks(per.max(1))
            .take(b)
            .map(|c| T::of(c.iter().map(|s| s.as_f64()).sum::<f64>() / per as f64))
            .collect();
        let value = Tensor::from_vec(&[b], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MeanPerSample(x.0), rg))
    }

    // ---- structural --------------------------------------------------

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("axis {axis} range {start}..{} on {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&v.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::from_vec(&out_shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Narrow { x: x.0, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return Err(shape_err("concat", format!("axis {axis} on {base_shape:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base_shape:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let d = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let value = Tensor::from_vec(&out_shape, data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    /// Average pooling without padding over `kh x kw` windows.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let v = self.value(x);
        let [b, c, h, w] = v.dims4()?;
        let (ho, wo) = match (
            conv_output_size(h, kh, stride, 0),
            conv_output_size(w, kw, stride, 0),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(shape_err(
                    "avg_pool2d",
                    format!("window {kh}x{kw} stride {stride} on {h}x{w}"),
                ))
            }
        };
        let norm = 1.0 / (kh * kw) as f64;
        let mut data = Vec::with_capacity(b * c * ho * wo);
        for plane in v.data().chunks(h * w).take(b * c) {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0f64;
                    for i in 0..kh {
                        let row = &plane[(oh * stride + i) * w + ow * stride..];
                        acc += row[..kw].iter().map(|s| s.as_f64()).sum::<f64>();
                    }
                    data.push(T::of(acc * norm));
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, ho, wo], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::AvgPool2d {
                x: x.0,
                kh,
                kw,
                stride,
            },
            rg,
        ))
    }

    // ---- convolution and normalization --------------------------------

    /// 2-D cross-correlation with symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let [batch, c_in, h, w] = self.value(x).dims4()?;
        let [c_out, kc, kh, kw] = self.value(kernel).dims4()?;
        if kc != c_in {
            return Err(shape_err(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        let (ho, wo) = match (
            conv_output_size(h, kh, stride, pad),
            conv_output_size(w, kw, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{w}"),
                ))
            }
        };
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let out = conv::forward(&geom, self.value(x).data(), self.value(kernel).data());
        let value = Tensor::from_vec(&[batch, c_out, ho, wo], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: kernel.0,
                geom,
            },
            rg,
        ))
    }

    /// Adds a per-channel bias `[C]` to a 4-D tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.shape(bias) != [c] {
            return Err(shape_err(
                "channel_bias",
                format!("bias {:?} for {c} channels", self.shape(bias)),
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, plane) in data.chunks_mut(h * w).take(b * c).enumerate() {
            let add = bv[i % c];
            plane.iter_mut().for_each(|v| *v = *v + add);
        }
        let value = Tensor::from_vec(&[b, c, h, w], data)?;
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(value, Op::ChannelBias { x: x.0, b: bias.0 }, rg))
    }

    /// Affine per-channel normalization with given statistics.
    ///
    /// When `batch_stats` is set, `mean`/`inv_std` are treated as functions of
    /// `x` in the backward pass; otherwise they are constants.
    pub(crate) fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, plane) in data.chunks_mut(h * w).take(b * c).enumerate() {
            let ch = i % c;
            let (m, s, gg, bb) = (mean[ch], inv_std[ch], g[ch].as_f64(), be[ch].as_f64());
            plane
                .iter_mut()
                .for_each(|v| *v = T::of((v.as_f64() - m) * s * gg + bb));
        }
        let value = Tensor::from_vec(&[b, c, h, w], data)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Back-propagates from a one-element loss. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |j: usize| self.nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::from_vec(node.value.shape(), gy)?;
                    match &mut self.grads[i] {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(a, &b)| *a = *a + b),
                        slot @ None => *slot = Some(t),
                    }
                }
                Op::Unary(x, kind) => {
                    let xv = self.nodes[*x].value.data();
                    let yv = node.value.data();
                    let d: Vec<T> = gy
                        .iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(&g, (&xs, &ys))| {
                            let (g, xs, ys) = (g.as_f64(), xs.as_f64(), ys.as_f64());
                            let dydx = match *kind {
                                Unary::Neg => -1.0,
                                Unary::Relu => f64::from(u8::from(xs > 0.0)),
                                Unary::LeakyRelu(s) => {
                                    if xs > 0.0 {
                                        1.0
                                    } else {
                                        s
                                    }
                                }
                                Unary::Sigmoid => ys * (1.0 - ys),
                                Unary::Tanh => 1.0 - ys * ys,
                                Unary::Abs => {
                                    if xs > 0.0 {
                                        1.0
                                    } else if xs < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Square => 2.0 * xs,
                                Unary::Sqrt => {
                                    if ys > 0.0 {
                                        0.5 / ys
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Log => 1.0 / xs,
                                Unary::Scale(k) => k,
                                Unary::AddScalar(_) => 1.0,
                                Unary::Clamp(lo, hi) => f64::from(u8::from(xs > lo && xs < hi)),
                            };
                            T::of(g * dydx)
                        })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Binary(a, b, kind) => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    if needs(*a) {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gy.clone(),
                            Binary::Mul => gy.iter().zip(bv).map(|(&g, &y)| g * y).collect(),
                            Binary::Div => gy.iter().zip(bv).map(|(&g, &y)| g / y).collect(),
                        };
                        accumulate(&mut grads, *a, d);
                    }
                    if needs(*b) {
                        let d = match kind {
                            Binary::Add => gy.clone(),
                            Binary::Sub => gy.iter().map(|&g| -g).collect(),
                            Binary::Mul => gy.iter().zip(av).map(|(&g, &x)| g * x).collect(),
                            Binary::Div => gy
                                .iter()
                                .zip(av.iter().zip(bv))
                                .map(|(&g, (&x, &y))| -g * x / (y * y))
                                .collect(),
                        };
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[*x].value.len();
                    accumulate(&mut grads, *x, vec![gy[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[*x].value.len();
                    accumulate(&mut grads, *x, vec![T::of(gy[0].as_f64() / n as f64); n]);
                }
                Op::SumChannels(x) => {
                    let [b, c, h, w] = self.nodes[*x].value.dims4()?;
                    let hw = h * w;
                    let mut d = Vec::with_capacity(b * c * hw);
                    for bi in 0..b {
                        for _ in 0..c {
                            d.extend_from_slice(&gy[bi * hw..(bi + 1) * hw]);
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::MeanPerSample(x) => {
                    let xv = &self.nodes[*x].value;
                    let b = xv.shape()[0];
                    let per = xv.len() / b.max(1);
                    let d = (0..b)
                        .flat_map(|bi| {
                            std::iter::repeat(T::of(gy[bi].as_f64() / per as f64)).take(per)
                        })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Narrow { x, axis, start } => {
                    let xs = self.nodes[*x].value.shape();
                    let (outer, dim, inner) = split_axis(xs, *axis);
                    let len = node.value.shape()[*axis];
                    let mut d = vec![T::zero(); outer * dim * inner];
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        d[dst..dst + len * inner]
                            .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let d_len = self.nodes[p].value.shape()[*axis];
                        if needs(p) {
                            let mut d = Vec::with_capacity(outer * d_len * inner);
                            for o in 0..outer {
                                let src = o * total * inner + offset * inner;
                                d.extend_from_slice(&gy[src..src + d_len * inner]);
                            }
                            accumulate(&mut grads, p, d);
                        }
                        offset += d_len;
                    }
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, gy),
                Op::AvgPool2d { x, kh, kw, stride } => {
                    let [b, c, h, w] = self.nodes[*x].value.dims4()?;
                    let [_, _, ho, wo] = node.value.dims4()?;
                    let norm = 1.0 / (kh * kw) as f64;
                    let mut d = vec![T::zero(); b * c * h * w];
                    for (plane, gplane) in d.chunks_mut(h * w).zip(gy.chunks(ho * wo)) {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let g = T::of(gplane[oh * wo + ow].as_f64() * norm);
                                for i in 0..*kh {
                                    let base = (oh * stride + i) * w + ow * stride;
                                    for v in &mut plane[base..base + kw] {
                                        *v = *v + g;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Conv2d { x, w, geom } => {
                    let (dx, dw) = conv::backward(
                        geom,
                        self.nodes[*x].value.data(),
                        self.nodes[*w].value.data(),
                        &gy,
                        needs(*x),
                        needs(*w),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::ChannelBias { x, b } => {
                    if needs(*b) {
                        let [_, c, h, w] = node.value.dims4()?;
                        let mut db = vec![0.0f64; c];
                        for (i, plane) in gy.chunks(h * w).enumerate() {
                            db[i % c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
                        }
                        accumulate(&mut grads, *b, db.into_iter().map(T::of).collect());
                    }
                    if needs(*x) {
                        accumulate(&mut grads, *x, gy);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let xv = &self.nodes[*x].value;
                    let [b, c, h, w] = xv.dims4()?;
                    let hw = h * w;
                    let n = (b * hw) as f64;
                    let gamma_v = self.nodes[*gamma].value.data();
                    let xhat = |i: usize, ch: usize| (xv.data()[i].as_f64() - mean[ch]) * inv_std[ch];
                    // per-channel sums of dy and dy * xhat
                    let mut sum_dy = vec![0.0f64; c];
                    let mut sum_dy_xhat = vec![0.0f64; c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            for k in base..base + hw {
                                let g = gy[k].as_f64();
                                sum_dy[ch] += g;
                                sum_dy_xhat[ch] += g * xhat(k, ch);
                            }
                        }
                    }
                    if needs(*x) {
                        let mut d = vec![T::zero(); xv.len()];
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * hw;
                                let scale = gamma_v[ch].as_f64() * inv_std[ch];
                                for k in base..base + hw {
                                    let g = gy[k].as_f64();
                                    d[k] = T::of(if *batch_stats {
                                        scale / n
                                            * (n * g - sum_dy[ch] - xhat(k, ch) * sum_dy_xhat[ch])
                                    } else {
                                        scale * g
                                    });
                                }
                            }
                        }
                        accumulate(&mut grads, *x, d);
                    }
                    if needs(*gamma) {
                        accumulate(&mut grads, *gamma, sum_dy_xhat.iter().map(|&v| T::of(v)).collect());
                    }
                    if needs(*beta) {
                        accumulate(&mut grads, *beta, sum_dy.iter().map(|&v| T::of(v)).collect());
                    }
                }
            }
        }
        Ok(())
    }
}
