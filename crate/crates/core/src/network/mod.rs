//! The segmentation networks: AMC-Net and its three ablation variants.
//!
//! Encoder levels run `conv3x3 -> MS-Block` (multi-scale variants) or
//! `conv3x3 -> conv3x3` (plain variants) followed by 2x2 max pooling; the
//! bottleneck is two 3x3 convolutions at sixteen times the base width. Each
//! decoder level upsamples, optionally gates the matching encoder output
//! with an attention gate, concatenates `(upsampled, skip)` and mirrors the
//! encoder level. A 1x1 convolution and a sigmoid produce the probability
//! map. Every 3x3 convolution is zero-padded by its dilation so spatial
//! extents are preserved within a level.

mod checkpoint;
mod spec;

use std::collections::HashMap;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use spec::{ConvLayer, ModelSpec, Variant};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Graph, Tensor, Var};
use crate::SeedRng;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Learned parameters of one network, in layer-inventory order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    spec: ModelSpec,
    params: Vec<NamedTensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelState<T> {
    /// Builds a freshly initialised network. Weights are He-uniform
    /// (`U(-b, b)`, `b = sqrt(6 / fan_in)`), biases zero, drawn in
    /// inventory order from a generator seeded with `spec.init_seed`.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeedRng::seed_from_u64(spec.init_seed);
        let mut params = Vec::new();
        for layer in spec.layer_plan() {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let weight = Tensor::from_fn(&layer.weight_shape(), |_| T::from_f64_lossy(dist.sample(&mut rng)));
            params.push(NamedTensor { name: format!("{}.weight", layer.name), tensor: weight });
            params.push(NamedTensor {
                name: format!("{}.bias", layer.name),
                tensor: Tensor::zeros(&[layer.out_channels]),
            });
        }
        Ok(Self::from_parts(spec.clone(), params))
    }

    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<NamedTensor<T>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ModelState { spec, params, index }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor<T>> {
        self.params.iter_mut()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let params = self
            .params
            .iter()
            .map(|p| NamedTensor { name: p.name.clone(), tensor: p.tensor.cast() })
            .collect();
        ModelState::from_parts(self.spec.clone(), params)
    }

    /// Registers every parameter on `graph`, trainable or constant.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self.params.iter().map(|p| graph.leaf(p.tensor.clone(), trainable)).collect();
        BoundParams { vars, index: self.index.clone() }
    }

    /// Inference on a `B x 1 x H x W` batch; returns probabilities of the
    /// same shape.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let params = self.bind(&mut graph, false);
        let x = graph.constant(batch.clone());
        let out = forward(&mut graph, self.spec(), &params, x, None)?;
        Ok(graph.value(out.output).clone())
    }
}

/// Graph handles of a model's parameters.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn conv(&self, layer: &str) -> Result<ConvVars> {
        Ok(ConvVars { weight: self.get(&format!("{layer}.weight"))?, bias: self.get(&format!("{layer}.bias"))? })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

fn conv_relu<T: Scalar>(g: &mut Graph<T>, x: Var, p: ConvVars, geom: ConvGeometry) -> Result<Var> {
    let y = g.conv2d(x, p.weight, Some(p.bias), geom)?;
    g.relu(y)
}

/// Multi-scale block: four parallel 3x3 convolutions of `n` channels at the
/// given dilation rates, concatenated to `4n` channels and projected back to
/// `n` by a 1x1 convolution. Spatial extent is preserved.
pub fn ms_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    branches: &[ConvVars],
    rates: &[usize],
    projection: ConvVars,
) -> Result<Var> {
    if rates.len() != 4 || branches.len() != 4 {
        return Err(Error::config(format!(
            "MS-Block needs 4 branches and 4 dilation rates, got {} and {}",
            branches.len(),
            rates.len()
        )));
    }
    let mut outs = Vec::with_capacity(4);
    for (&p, &d) in branches.iter().zip(rates) {
        outs.push(conv_relu(g, x, p, ConvGeometry::same3x3(d))?);
    }
    let cat = g.concat(&outs)?;
    conv_relu(g, cat, projection, ConvGeometry::pointwise())
}

/// Attention gate: `skip * sigmoid(c(relu(a(gating) + b(skip))))`, where
/// `a`, `b`, `c` are 1x1 convolutions and the one-channel gate is broadcast
/// over the skip channels.
pub fn attention_gate<T: Scalar>(
    g: &mut Graph<T>,
    skip: Var,
    gating: Var,
    a: ConvVars,
    b: ConvVars,
    c: ConvVars,
) -> Result<Var> {
    let (_, _, hs, ws) = g.value(skip).dims4()?;
    let (_, _, hg, wg) = g.value(gating).dims4()?;
    if (hs, ws) != (hg, wg) {
        return Err(Error::shape(format!("attention gate: skip is {hs}x{ws}, gating is {hg}x{wg}")));
    }
    let ga = g.conv2d(gating, a.weight, Some(a.bias), ConvGeometry::pointwise())?;
    let gb = g.conv2d(skip, b.weight, Some(b.bias), ConvGeometry::pointwise())?;
    let sum = g.add(ga, gb)?;
    let act = g.relu(sum)?;
    let logits = g.conv2d(act, c.weight, Some(c.bias), ConvGeometry::pointwise())?;
    let gate = g.sigmoid(logits)?;
    g.mul(skip, gate)
}

/// Output of one forward pass.
pub struct ForwardOutput {
    pub output: Var,
    /// Final activation of each of the nine blocks (encoder outputs are taken
    /// before pooling).
    pub blocks: [Var; 9],
}

fn spatial_dropout<T: Scalar>(g: &mut Graph<T>, x: Var, p: f64, rng: &mut SeedRng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let (b, c, _, _) = g.value(x).dims4()?;
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let scale = (0..b * c).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    g.scale_channels(x, scale)
}

/// Runs the network on a `B x 1 x H x W` input. `dropout_rng` switches on
/// training behaviour (spatial dropout after every MS-Block); `None` is
/// deterministic inference.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    params: &BoundParams,
    input: Var,
    mut dropout_rng: Option<&mut SeedRng>,
) -> Result<ForwardOutput> {
    let (_, c, h, w) = g.value(input).dims4()?;
    if c != 1 || h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::shape(format!(
            "network input must be B x 1 x H x W with H, W positive multiples of 16; got {:?}",
            g.value(input).shape()
        )));
    }
    let ms = spec.variant.has_ms_blocks();
    let ag = spec.variant.has_attention();
    let rates = &spec.dilation_rates;
    let same = ConvGeometry::same3x3(1);

    let level = |g: &mut Graph<T>, x: Var, idx: usize, rng: &mut Option<&mut SeedRng>| -> Result<Var> {
        let h = conv_relu(g, x, params.conv(&format!("conv{idx}"))?, same)?;
        if ms {
            let prefix = format!("ms{idx}");
            let branches = (0..4)
                .map(|b| params.conv(&format!("{prefix}.branch{b}")))
                .collect::<Result<Vec<_>>>()?;
            let out = ms_block(g, h, &branches, rates, params.conv(&format!("{prefix}.proj"))?)?;
            match rng {
                Some(r) => spatial_dropout(g, out, spec.dropout_p, r),
                None => Ok(out),
            }
        } else {
            conv_relu(g, h, params.conv(&format!("conv{}", idx + 1))?, same)
        }
    };

    let mut blocks = Vec::with_capacity(9);
    let mut skips = Vec::with_capacity(4);
    let mut x = input;
    for lvl in 0..4 {
        let out = level(g, x, 2 * lvl + 1, &mut dropout_rng)?;
        skips.push(out);
        blocks.push(out);
        x = g.maxpool2d(out)?;
    }
    let h9 = conv_relu(g, x, params.conv("conv9")?, same)?;
    let mut hcur = conv_relu(g, h9, params.conv("conv10")?, same)?;
    blocks.push(hcur);
    for j in 0..4 {
        let up = g.upsample2d(hcur)?;
        let skip = skips[3 - j];
        let gated = if ag {
            let p = format!("ag{}", j + 1);
            attention_gate(
                g,
                skip,
                up,
                params.conv(&format!("{p}.a"))?,
                params.conv(&format!("{p}.b"))?,
                params.conv(&format!("{p}.c"))?,
            )?
        } else {
            skip
        };
        let cat = g.concat(&[up, gated])?;
        hcur = level(g, cat, 11 + 2 * j, &mut dropout_rng)?;
        blocks.push(hcur);
    }
    let head = params.conv("conv19")?;
    let logits = g.conv2d(hcur, head.weight, Some(head.bias), ConvGeometry::pointwise())?;
    let output = g.sigmoid(logits)?;
    let blocks: [Var; 9] = blocks.try_into().expect("nine blocks");
    Ok(ForwardOutput { output, blocks })
}

/// One channel of a block activation, min-max normalised to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Per-channel activation maps of block `block_index` (1-9) for the first
/// image of `input`. Constant maps normalise to all zeros.
pub fn dump_features<T: Scalar>(state: &ModelState<T>, input: &Tensor<T>, block_index: usize) -> Result<Vec<FeatureMap>> {
    if !(1..=9).contains(&block_index) {
        return Err(Error::InvalidInput(format!("block index {block_index} outside 1..=9")));
    }
    let mut graph = Graph::new();
    let params = state.bind(&mut graph, false);
    let x = graph.constant(input.clone());
    let out = forward(&mut graph, state.spec(), &params, x, None)?;
    let act = graph.value(out.blocks[block_index - 1]);
    let (_, c, h, w) = act.dims4()?;
    let plane = h * w;
    Ok((0..c)
        .map(|ci| {
            let src = &act.data()[ci * plane..(ci + 1) * plane];
            let lo = src.iter().copied().fold(T::infinity(), T::min);
            let hi = src.iter().copied().fold(T::neg_infinity(), T::max);
            let range = hi - lo;
            let data = src
                .iter()
                .map(|&v| if range > T::zero() { ((v - lo) / range).to_f64_lossy() as f32 } else { 0.0 })
                .collect();
            FeatureMap { height: h, width: w, data }
        })
        .collect())
}

/// Draws a uniform tensor in `[lo, hi)`; test and tooling helper.
pub fn random_tensor<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
}
