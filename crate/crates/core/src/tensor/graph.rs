use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, ConvShape};
use super::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride, dilation and per-side zero padding of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Size-preserving geometry for a 3x3 kernel at dilation `d` (padding `d`).
    pub fn same3x3(dilation: usize) -> Self {
        ConvGeometry { stride: 1, dilation, padding: dilation }
    }

    pub fn pointwise() -> Self {
        ConvGeometry { stride: 1, dilation: 1, padding: 0 }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, shape: ConvShape },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Upsample2 { input: Var },
    Relu { input: Var },
    Sigmoid { input: Var },
    Add { a: Var, b: Var },
    /// `b` is either the same shape as `a` or a single channel broadcast
    /// over all channels of `a`.
    Mul { a: Var, b: Var, broadcast: bool },
    Concat { inputs: Vec<Var> },
    ScaleChannels { input: Var, scale: Vec<T> },
    Sum { input: Var },
    Mean { input: Var },
    /// Scalar produced by an external function whose gradient with respect
    /// to `input` was computed alongside the value.
    External { input: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    name: &'static str,
}

/// Gradient tape. Values are appended in execution order, so reverse index
/// order is a reverse topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None, name: "leaf" });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None, name });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// 2-D convolution of a BCHW input with an `(out_c, in_c, k, k)` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        if geom.dilation == 0 {
            return Err(Error::config("convolution dilation must be positive"));
        }
        if geom.stride == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        let (b, c, h, w) = self.value(input).dims4()?;
        let (out_c, in_c, kh, kw) = self.value(weight).dims4()?;
        if kh != kw {
            return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
        }
        if in_c != c {
            return Err(Error::shape(format!("conv2d: input has {c} channels, kernel expects {in_c}")));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [out_c] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?}, expected [{out_c}]",
                    self.value(bv).shape()
                )));
            }
        }
        let extent = (kh - 1) * geom.dilation + 1;
        let (ph, pw) = (h + 2 * geom.padding, w + 2 * geom.padding);
        if extent > ph || extent > pw {
            return Err(Error::shape(format!(
                "conv2d: effective kernel extent {extent} exceeds padded input {ph}x{pw}"
            )));
        }
        let shape = ConvShape {
            in_c,
            in_h: h,
            in_w: w,
            out_c,
            out_h: (ph - extent) / geom.stride + 1,
            out_w: (pw - extent) / geom.stride + 1,
            k: kh,
            stride: geom.stride,
            dilation: geom.dilation,
            pad: geom.padding,
        };
        let mut out = vec![T::zero(); b * out_c * shape.out_plane()];
        kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data()),
            b,
            &shape,
            &mut out,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|bv| self.rg(bv));
        let value = Tensor::new(vec![b, out_c, shape.out_h, shape.out_w], out)?;
        self.push("conv2d", value, Op::Conv2d { input, weight, bias, shape }, rg)
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool2d needs even extents, got {h}x{w}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        let rg = self.rg(input);
        self.push("maxpool2d", value, Op::MaxPool2 { input, argmax }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2d(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let out = kernels::upsample2_forward(self.value(input).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(input);
        self.push("upsample2d", value, Op::Upsample2 { input }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(input);
        self.push("relu", value, Op::Relu { input }, rg)
    }

    /// Logistic sigmoid. Outputs are kept strictly inside (0, 1) by clamping
    /// to one machine epsilon from either end.
    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let eps = T::epsilon();
        let data = x.data().iter().map(|&v| sigmoid(v).max(eps).min(T::one() - eps)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(input);
        self.push("sigmoid", value, Op::Sigmoid { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() != xb.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", xa.shape(), xb.shape())));
        }
        let data = xa.data().iter().zip(xb.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(xa.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add { a, b }, rg)
    }

    /// Element-wise product. `b` may have one channel, in which case it is
    /// broadcast over every channel of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        let (ba, ca, ha, wa) = xa.dims4()?;
        let (bb, cb, hb, wb) = xb.dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) || (cb != ca && cb != 1) {
            return Err(Error::shape(format!("mul: {:?} vs {:?}", xa.shape(), xb.shape())));
        }
        let broadcast = cb != ca;
        let plane = ha * wa;
        let data: Vec<T> = if broadcast {
            let mut out = Vec::with_capacity(xa.numel());
            for bi in 0..ba {
                let gate = &xb.data()[bi * plane..(bi + 1) * plane];
                for ci in 0..ca {
                    let src = &xa.data()[(bi * ca + ci) * plane..(bi * ca + ci + 1) * plane];
                    out.extend(src.iter().zip(gate).map(|(&p, &q)| p * q));
                }
            }
            out
        } else {
            xa.data().iter().zip(xb.data()).map(|(&p, &q)| p * q).collect()
        };
        let value = Tensor::new(xa.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul { a, b, broadcast }, rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (b, _, h, w) = self.value(*first).dims4()?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (bi, ci, hi, wi) = self.value(v).dims4()?;
            if (bi, hi, wi) != (b, h, w) {
                return Err(Error::shape(format!(
                    "concat: {:?} does not match batch/spatial extents of {:?}",
                    self.value(v).shape(),
                    self.value(*first).shape()
                )));
            }
            channels.push(ci);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&v, &ci) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[bi * ci * plane..(bi + 1) * ci * plane]);
            }
        }
        let value = Tensor::new(vec![b, total, h, w], out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push("concat", value, Op::Concat { inputs: inputs.to_vec() }, rg)
    }

    /// Multiplies each (batch, channel) plane by its own constant. Used for
    /// spatial dropout.
    pub fn scale_channels(&mut self, input: Var, scale: Vec<T>) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if scale.len() != b * c {
            return Err(Error::shape(format!("scale_channels: {} factors for {b}x{c} planes", scale.len())));
        }
        let plane = h * w;
        let data = self
            .value(input)
            .data()
            .chunks(plane)
            .zip(&scale)
            .flat_map(|(chunk, &s)| chunk.iter().map(move |&v| v * s))
            .collect();
        let value = Tensor::new(vec![b, c, h, w], data)?;
        let rg = self.rg(input);
        self.push("scale_channels", value, Op::ScaleChannels { input, scale }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum();
        let rg = self.rg(input);
        self.push("sum", Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = T::from_usize(x.numel()).unwrap();
        let s = x.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(input);
        self.push("mean", Tensor::scalar(s), Op::Mean { input }, rg)
    }

    /// Records a scalar computed outside the graph together with its
    /// gradient with respect to `input` (used for the fused loss kernels).
    pub fn external_scalar(&mut self, input: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return Err(Error::shape("external_scalar: gradient length differs from input"));
        }
        let rg = self.rg(input);
        self.push("loss", Tensor::scalar(value), Op::External { input, grad }, rg)
    }

    /// Reverse pass from a scalar. Gradients of leaves accumulate across
    /// calls: running it twice without [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Autograd("loss is not connected to any trainable leaf".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a += d),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, shape } => {
                let batch = node.value.shape()[0];
                let mut gi = self.rg(*input).then(|| take_or_zeros(grads, *input, self.value(*input).numel()));
                let mut gw = self.rg(*weight).then(|| take_or_zeros(grads, *weight, self.value(*weight).numel()));
                let mut gb = bias
                    .filter(|bv| self.rg(*bv))
                    .map(|bv| take_or_zeros(grads, bv, self.value(bv).numel()));
                kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    batch,
                    shape,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gi {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[weight.0] = Some(v);
                }
                if let (Some(v), Some(bv)) = (gb, bias) {
                    grads[bv.0] = Some(v);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let acc = slot(grads, *input, self.value(*input).numel());
                for (&idx, &d) in argmax.iter().zip(g) {
                    acc[idx as usize] += d;
                }
            }
            Op::Upsample2 { input } => {
                let (b, c, h, w) = self.value(*input).dims4().unwrap();
                let acc = slot(grads, *input, b * c * h * w);
                kernels::upsample2_backward_add(g, b * c, h, w, acc);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let acc = slot(grads, *input, x.len());
                for ((a, &xv), &d) in acc.iter_mut().zip(x).zip(g) {
                    if xv > T::zero() {
                        *a += d;
                    }
                }
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                let acc = slot(grads, *input, y.len());
                for ((a, &yv), &d) in acc.iter_mut().zip(y).zip(g) {
                    *a += d * yv * (T::one() - yv);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(acc, &d)| *acc += d);
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let (bn, c, h, w) = xa.dims4().unwrap();
                let plane = h * w;
                if self.rg(*a) {
                    let acc = slot(grads, *a, xa.numel());
                    for bi in 0..bn {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            let gate_off = if *broadcast { bi * plane } else { off };
                            for p in 0..plane {
                                acc[off + p] += g[off + p] * xb.data()[gate_off + p];
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let acc = slot(grads, *b, xb.numel());
                    for bi in 0..bn {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            let gate_off = if *broadcast { bi * plane } else { off };
                            for p in 0..plane {
                                acc[gate_off + p] += g[off + p] * xa.data()[off + p];
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs } => {
                let (b, total, h, w) = node.value.dims4().unwrap();
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let ci = self.value(v).shape()[1];
                    if self.rg(v) {
                        let acc = slot(grads, v, b * ci * plane);
                        for bi in 0..b {
                            let src = &g[(bi * total + offset) * plane..(bi * total + offset + ci) * plane];
                            let dst = &mut acc[bi * ci * plane..(bi + 1) * ci * plane];
                            dst.iter_mut().zip(src).for_each(|(a, &d)| *a += d);
                        }
                    }
                    offset += ci;
                }
            }
            Op::ScaleChannels { input, scale } => {
                let plane = node.value.numel() / scale.len();
                let acc = slot(grads, *input, node.value.numel());
                for ((chunk, gchunk), &s) in acc.chunks_mut(plane).zip(g.chunks(plane)).zip(scale) {
                    chunk.iter_mut().zip(gchunk).for_each(|(a, &d)| *a += d * s);
                }
            }
            Op::Sum { input } => {
                let acc = slot(grads, *input, self.value(*input).numel());
                acc.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                let d = g[0] / T::from_usize(n).unwrap();
                slot(grads, *input, n).iter_mut().for_each(|a| *a += d);
            }
            Op::External { input, grad } => {
                let acc = slot(grads, *input, grad.len());
                acc.iter_mut().zip(grad).for_each(|(a, &d)| *a += g[0] * d);
            }
        }
    }

    /// The branch taken by every piecewise op so far: ReLU signs and max-pool
    /// winners. Two evaluations with equal patterns lie on the same smooth
    /// piece of the recorded function.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { .. } => out.extend(n.value.data().iter().map(|&v| (v > T::zero()) as u32)),
                Op::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Names of recorded ops in execution order (leaves included).
    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.name)
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn take_or_zeros<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> Vec<T> {
    grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
