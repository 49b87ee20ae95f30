//! Declarative layer tables for the generator variants and discriminators.
//!
//! A [`NetworkSpec`] is plain data. It round-trips through a TOML file with one
//! `[[layers]]` record per layer, so the tables can be inspected and diffed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
    ResidualBlock,
    SubpixelBlock,
    SelfAttention,
    GlobalAvgPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    Spectral,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    None,
}

/// One row of a layer table.
///
/// `n` is the number of output channels of the layer's convolution. For a
/// sub-pixel block that is the pre-shuffle count, so the block emits
/// `n / upscale²` channels. Attention and pooling layers keep the channel
/// count and use `n` only as a consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub n: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub norm: Norm,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub output_padding: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub upscale: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl LayerSpec {
    pub fn conv(n: usize, k: usize, s: usize, p: usize, norm: Norm, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Conv,
            n,
            k,
            s,
            p,
            norm,
            activation,
            output_padding: 0,
            upscale: 0,
        }
    }

    pub fn transposed_conv(n: usize, k: usize, s: usize, p: usize, output_padding: usize) -> Self {
        Self {
            kind: LayerKind::TransposedConv,
            output_padding,
            ..Self::conv(n, k, s, p, Norm::Instance, Activation::Relu)
        }
    }

    pub fn residual(n: usize) -> Self {
        Self {
            kind: LayerKind::ResidualBlock,
            ..Self::conv(n, 3, 1, 1, Norm::Instance, Activation::Relu)
        }
    }

    pub fn subpixel(n: usize, upscale: usize) -> Self {
        Self {
            kind: LayerKind::SubpixelBlock,
            upscale,
            ..Self::conv(n, 3, 1, 1, Norm::Instance, Activation::Relu)
        }
    }

    pub fn self_attention(n: usize) -> Self {
        Self {
            kind: LayerKind::SelfAttention,
            ..Self::conv(n, 1, 1, 0, Norm::None, Activation::None)
        }
    }

    pub fn validate(&self, in_channels: usize) -> Result<()> {
        if self.k == 0 || self.s == 0 || self.n == 0 {
            return Err(Error::LayerTable(format!("{self:?}: N, K and S must be at least 1")));
        }
        match self.kind {
            LayerKind::ResidualBlock if self.n != in_channels || self.s != 1 || self.k != 2 * self.p + 1 => {
                Err(Error::LayerTable(format!(
                    "residual block must preserve shape: {in_channels} input channels, got {self:?}"
                )))
            }
            LayerKind::SubpixelBlock if self.upscale == 0 || !self.n.is_multiple_of(self.upscale * self.upscale) => {
                Err(Error::LayerTable(format!(
                    "sub-pixel block needs N divisible by upscale²: {self:?}"
                )))
            }
            LayerKind::SelfAttention | LayerKind::GlobalAvgPool if self.n != in_channels => Err(Error::LayerTable(
                format!("{:?} must keep {in_channels} channels, got N={}", self.kind, self.n),
            )),
            LayerKind::TransposedConv if self.output_padding >= self.s => Err(Error::LayerTable(format!(
                "output padding must be below stride: {self:?}"
            ))),
            _ => Ok(()),
        }
    }

    /// Channel count after this layer.
    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::SubpixelBlock => self.n / (self.upscale * self.upscale),
            _ => self.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::LayerTable(format!("{}: empty layer table", self.name)));
        }
        let mut channels = self.in_channels;
        for layer in &self.layers {
            layer.validate(channels)?;
            channels = layer.out_channels();
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, LayerSpec::out_channels)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// The three generator configurations under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GeneratorVariant {
    /// Sub-pixel upsampling.
    #[serde(rename = "A")]
    Subpixel,
    /// Transposed-convolution upsampling.
    #[serde(rename = "B")]
    Baseline,
    /// Sub-pixel upsampling with self-attention, paired with a spectrally normalized discriminator.
    #[serde(rename = "C")]
    Attention,
}

pub const RESIDUAL_BLOCKS: usize = 9;
pub const SUBPIXEL_FACTOR: usize = 4;

impl GeneratorVariant {
    pub const ALL: [GeneratorVariant; 3] = [Self::Subpixel, Self::Baseline, Self::Attention];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Subpixel => "A",
            Self::Baseline => "B",
            Self::Attention => "C",
        }
    }

    pub fn generator_spec(self) -> NetworkSpec {
        let mut layers = vec![
            LayerSpec::conv(64, 7, 1, 3, Norm::Instance, Activation::Relu),
            LayerSpec::conv(128, 3, 2, 1, Norm::Instance, Activation::Relu),
            LayerSpec::conv(256, 3, 2, 1, Norm::Instance, Activation::Relu),
        ];
        if self == Self::Attention {
            layers.push(LayerSpec::self_attention(256));
        }
        layers.extend(std::iter::repeat_n(LayerSpec::residual(256), RESIDUAL_BLOCKS));
        match self {
            Self::Baseline => {
                layers.push(LayerSpec::transposed_conv(128, 3, 2, 1, 1));
                layers.push(LayerSpec::transposed_conv(64, 3, 2, 1, 1));
            }
            Self::Subpixel => layers.push(LayerSpec::subpixel(1024, SUBPIXEL_FACTOR)),
            Self::Attention => {
                layers.push(LayerSpec::self_attention(256));
                layers.push(LayerSpec::subpixel(1024, SUBPIXEL_FACTOR));
            }
        }
        layers.push(LayerSpec::conv(3, 7, 1, 3, Norm::None, Activation::Tanh));
        NetworkSpec {
            name: format!("generator_{}", self.tag()),
            in_channels: 3,
            layers,
        }
    }

    pub fn discriminator(self) -> DiscriminatorKind {
        match self {
            Self::Attention => DiscriminatorKind::Patch70SnAttention,
            _ => DiscriminatorKind::Patch70,
        }
    }
}

impl fmt::Display for GeneratorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for GeneratorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::Subpixel),
            "B" | "b" => Ok(Self::Baseline),
            "C" | "c" => Ok(Self::Attention),
            other => Err(Error::validation(
                "variant",
                format!("expected A, B or C, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    Patch70,
    Patch70SnAttention,
}

impl DiscriminatorKind {
    pub fn spec(self) -> NetworkSpec {
        let (norm, first_norm, out_norm) = match self {
            Self::Patch70 => (Norm::Instance, Norm::None, Norm::None),
            Self::Patch70SnAttention => (Norm::Spectral, Norm::Spectral, Norm::Spectral),
        };
        let leaky = Activation::LeakyRelu;
        let mut layers = vec![
            LayerSpec::conv(64, 4, 2, 1, first_norm, leaky),
            LayerSpec::conv(128, 4, 2, 1, norm, leaky),
            LayerSpec::conv(256, 4, 2, 1, norm, leaky),
        ];
        if self == Self::Patch70SnAttention {
            layers.push(LayerSpec::self_attention(256));
        }
        layers.push(LayerSpec::conv(512, 4, 1, 1, norm, leaky));
        if self == Self::Patch70SnAttention {
            layers.push(LayerSpec::self_attention(512));
        }
        layers.push(LayerSpec::conv(1, 4, 1, 1, out_norm, Activation::None));
        NetworkSpec {
            name: match self {
                Self::Patch70 => "patch70".into(),
                Self::Patch70SnAttention => "patch70_sn_attention".into(),
            },
            in_channels: 3,
            layers,
        }
    }
}

/// Receptive field of one final-layer unit, by the backward recurrence
/// `rf ← rf·s + (k − s)` starting from `rf = 1`.
pub fn receptive_field(layers: &[LayerSpec]) -> Result<usize> {
    let mut rf = 1usize;
    for layer in layers.iter().rev() {
        if layer.kind != LayerKind::Conv {
            return Err(Error::LayerTable(format!(
                "receptive field is defined for convolution stacks only, found {:?}",
                layer.kind
            )));
        }
        if layer.k == 0 || layer.s == 0 {
            return Err(Error::LayerTable("kernel and stride must be positive".into()));
        }
        rf = rf * layer.s + layer.k - layer.s;
    }
    Ok(rf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch70_receptive_field() {
        assert_eq!(receptive_field(&DiscriminatorKind::Patch70.spec().layers).unwrap(), 70);
    }

    #[test]
    fn receptive_field_small_stacks() {
        let single = [LayerSpec::conv(8, 7, 1, 3, Norm::None, Activation::None)];
        assert_eq!(receptive_field(&single).unwrap(), 7);
        let two = [
            LayerSpec::conv(8, 3, 2, 1, Norm::None, Activation::None),
            LayerSpec::conv(8, 3, 1, 1, Norm::None, Activation::None),
        ];
        assert_eq!(receptive_field(&two).unwrap(), 7);
    }

    #[test]
    fn receptive_field_rejects_non_conv() {
        let layers = DiscriminatorKind::Patch70SnAttention.spec().layers;
        assert!(matches!(receptive_field(&layers), Err(Error::LayerTable(_))));
    }

    #[test]
    fn all_tables_validate() {
        for v in GeneratorVariant::ALL {
            v.generator_spec().validate().unwrap();
            v.discriminator().spec().validate().unwrap();
            assert_eq!(v.generator_spec().out_channels(), 3);
        }
    }

    #[test]
    fn attention_variant_is_subpixel_plus_two_attention_layers() {
        let a = GeneratorVariant::Subpixel.generator_spec().layers;
        let c: Vec<_> = GeneratorVariant::Attention
            .generator_spec()
            .layers
            .into_iter()
            .filter(|l| l.kind != LayerKind::SelfAttention)
            .collect();
        assert_eq!(a, c);
    }

    #[test]
    fn toml_round_trip() {
        for v in GeneratorVariant::ALL {
            let spec = v.generator_spec();
            let text = spec.to_toml().unwrap();
            assert!(text.contains("[[layers]]"));
            assert_eq!(NetworkSpec::from_toml(&text).unwrap(), spec);
        }
    }

    #[test]
    fn residual_block_must_preserve_shape() {
        let bad = NetworkSpec {
            name: "bad".into(),
            in_channels: 128,
            layers: vec![LayerSpec::residual(256)],
        };
        assert!(bad.validate().is_err());
        let strided = LayerSpec {
            s: 2,
            ..LayerSpec::residual(256)
        };
        assert!(strided.validate(256).is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("C".parse::<GeneratorVariant>().unwrap(), GeneratorVariant::Attention);
        assert!("D".parse::<GeneratorVariant>().is_err());
    }
}
