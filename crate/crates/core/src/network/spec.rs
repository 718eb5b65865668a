use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain encoder-decoder with concatenated skips.
    UNet,
    /// U-Net with attention-gated skips.
    AttUNet,
    /// U-Net with multi-scale dilated blocks.
    MsuNet,
    /// Multi-scale blocks and attention gates.
    AmcNet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::UNet, Variant::AttUNet, Variant::MsuNet, Variant::AmcNet];

    pub fn name(self) -> &'static str {
        match self {
            Variant::UNet => "UNET",
            Variant::AttUNet => "ATT_UNET",
            Variant::MsuNet => "MSU_NET",
            Variant::AmcNet => "AMC_NET",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key: String = s.trim().to_ascii_uppercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.as_str() {
            "UNET" => Ok(Variant::UNet),
            "ATTUNET" | "ATTENTIONUNET" => Ok(Variant::AttUNet),
            "MSUNET" => Ok(Variant::MsuNet),
            "AMCNET" => Ok(Variant::AmcNet),
            _ => Err(Error::config(format!("unknown model variant `{s}`"))),
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Variant::UNet => 0,
            Variant::AttUNet => 1,
            Variant::MsuNet => 2,
            Variant::AmcNet => 3,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Variant::ALL.get(code as usize).copied()
    }

    pub fn has_ms_blocks(self) -> bool {
        matches!(self, Variant::MsuNet | Variant::AmcNet)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::AttUNet | Variant::AmcNet)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture configuration. Together with `init_seed` it fully determines
/// the freshly built parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub base_channels: usize,
    pub dilation_rates: Vec<usize>,
    /// Nominal patch size (height, width).
    pub input_size: (usize, usize),
    pub init_seed: u64,
    /// Spatial dropout probability applied after each MS-Block in training.
    pub dropout_p: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Variant::AmcNet,
            base_channels: 16,
            dilation_rates: vec![1, 2, 3, 5],
            input_size: (128, 128),
            init_seed: 0,
            dropout_p: 0.2,
        }
    }
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        ModelSpec { variant, ..Default::default() }
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn with_dilation_rates(mut self, rates: Vec<usize>) -> Self {
        self.dilation_rates = rates;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_channels == 0 {
            problems.push("base_channels must be positive".to_string());
        }
        if self.dilation_rates.len() != 4 {
            problems.push(format!("dilation_rates needs exactly 4 entries, got {}", self.dilation_rates.len()));
        }
        if self.dilation_rates.contains(&0) {
            problems.push("dilation rates must be positive".to_string());
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            problems.push(format!("input size {h}x{w} must be a positive multiple of 16"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            problems.push(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        match problems.len() {
            0 => Ok(()),
            1 => Err(Error::Config(problems.remove(0))),
            _ => Err(Error::ConfigKeys(problems)),
        }
    }

    /// Channel widths of encoder levels 1-4.
    pub fn level_widths(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn bottleneck_width(&self) -> usize {
        16 * self.base_channels
    }

    /// Intermediate width of the attention gate on a skip of `skip` channels.
    pub fn gate_width(skip: usize) -> usize {
        (skip / 2).max(1)
    }

    /// Every convolution of the architecture, in construction order.
    pub fn layer_plan(&self) -> Vec<ConvLayer> {
        let ms = self.variant.has_ms_blocks();
        let ag = self.variant.has_attention();
        let widths = self.level_widths();
        let mut plan = Vec::new();
        let mut cin = 1;
        for (lvl, &n) in widths.iter().enumerate() {
            let idx = 2 * lvl + 1;
            plan.push(ConvLayer::new(format!("conv{idx}"), cin, n, 3));
            if ms {
                push_ms_block(&mut plan, &format!("ms{idx}"), n);
            } else {
                plan.push(ConvLayer::new(format!("conv{}", idx + 1), n, n, 3));
            }
            cin = n;
        }
        let bw = self.bottleneck_width();
        plan.push(ConvLayer::new("conv9", widths[3], bw, 3));
        plan.push(ConvLayer::new("conv10", bw, bw, 3));
        let mut up = bw;
        for j in 0..4 {
            let n = widths[3 - j];
            if ag {
                let gw = Self::gate_width(n);
                let p = format!("ag{}", j + 1);
                plan.push(ConvLayer::new(format!("{p}.a"), up, gw, 1));
                plan.push(ConvLayer::new(format!("{p}.b"), n, gw, 1));
                plan.push(ConvLayer::new(format!("{p}.c"), gw, 1, 1));
            }
            let idx = 11 + 2 * j;
            plan.push(ConvLayer::new(format!("conv{idx}"), up + n, n, 3));
            if ms {
                push_ms_block(&mut plan, &format!("ms{idx}"), n);
            } else {
                plan.push(ConvLayer::new(format!("conv{}", idx + 1), n, n, 3));
            }
            up = n;
        }
        plan.push(ConvLayer::new("conv19", widths[0], 1, 1));
        plan
    }

    /// Number of trainable scalars (weights and biases).
    pub fn parameter_count(&self) -> usize {
        self.layer_plan().iter().map(ConvLayer::parameter_count).sum()
    }
}

fn push_ms_block(plan: &mut Vec<ConvLayer>, prefix: &str, n: usize) {
    for branch in 0..4 {
        plan.push(ConvLayer::new(format!("{prefix}.branch{branch}"), n, n, 3));
    }
    plan.push(ConvLayer::new(format!("{prefix}.proj"), 4 * n, n, 1));
}

/// One convolution in the layer inventory. Its parameters are stored as
/// `<name>.weight` `(out, in, k, k)` and `<name>.bias` `(out)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvLayer {
    fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvLayer { name: name.into(), in_channels, out_channels, kernel }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(Variant::from_code(v.code()), Some(v));
        }
        assert_eq!(Variant::parse("amc-net").unwrap(), Variant::AmcNet);
        assert!(Variant::parse("r2unet").is_err());
    }

    #[test]
    fn validation_reports_each_problem() {
        let spec = ModelSpec { dilation_rates: vec![1, 2, 3], input_size: (100, 128), ..Default::default() };
        match spec.validate() {
            Err(Error::ConfigKeys(p)) => assert_eq!(p.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ModelSpec::default().validate().is_ok());
    }

    #[test]
    fn ms_block_count_formula() {
        for n in [1usize, 2, 16, 128] {
            let mut plan = Vec::new();
            push_ms_block(&mut plan, "ms", n);
            let counted: usize = plan.iter().map(ConvLayer::parameter_count).sum();
            assert_eq!(counted, 4 * (9 * n * n + n) + (4 * n * n + n));
        }
    }

    #[test]
    fn unet_has_full_conv_inventory() {
        let plan = ModelSpec::new(Variant::UNet).layer_plan();
        let names: Vec<_> = plan.iter().map(|l| l.name.as_str()).collect();
        let expected: Vec<String> = (1..=19).map(|i| format!("conv{i}")).collect();
        assert_eq!(names, expected);
    }

    #[test]
    fn amc_inventory_has_blocks_and_gates() {
        let plan = ModelSpec::new(Variant::AmcNet).layer_plan();
        let ms = plan.iter().filter(|l| l.name.ends_with(".proj")).count();
        let gates = plan.iter().filter(|l| l.name.ends_with(".c")).count();
        assert_eq!((ms, gates), (8, 4));
        let widths: Vec<_> = plan
            .iter()
            .filter(|l| l.name.starts_with("ag") && l.name.ends_with(".a"))
            .map(|l| l.out_channels)
            .collect();
        assert_eq!(widths, [64, 32, 16, 8]);
    }
}
