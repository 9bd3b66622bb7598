//! Layer-level description of the generator, critic and autoencoders.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KERNEL: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Spatial size of the shared interior feature map.
pub const INTERIOR: usize = 4;
const MAX_WIDTH: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Dcgan,
    WganGp,
    WganClip,
}

impl LossMode {
    /// Whether the critic normalises its hidden conv layers.
    pub fn critic_has_batch_norm(self) -> bool {
        !matches!(self, LossMode::WganGp)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Dcgan => "dcgan",
            LossMode::WganGp => "wgan_gp",
            LossMode::WganClip => "wgan_clip",
        })
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcgan" => Ok(LossMode::Dcgan),
            "wgan_gp" => Ok(LossMode::WganGp),
            "wgan_clip" => Ok(LossMode::WganClip),
            _ => Err(Error::Config(format!(
                "unknown loss mode {s:?} (expected dcgan, wgan_gp or wgan_clip)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeVariant {
    /// Same shape as the GAN parts so their weights can be transplanted; the
    /// encoder follows the critic built for `loss_mode`.
    Transfer { loss_mode: LossMode },
    /// Batch norm after every conv and a sigmoid output on `[0, 1]` data.
    Scratch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "net")]
pub enum NetKind {
    Generator,
    Critic { loss_mode: LossMode },
    Autoencoder { variant: AeVariant },
}

/// Channel widths of the conv stack and the latent size. The image side is
/// `INTERIOR * 2^widths.len()`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Encoder order: the first entry is the widest-resolution layer.
    pub widths: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            widths: vec![128, 256, 512, 1024],
            latent_dim: 100,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let width_ok = |w: &usize| (1..=MAX_WIDTH).contains(w);
        if self.widths.is_empty() || self.widths.len() > 6 || !self.widths.iter().all(width_ok) {
            return Err(Error::InvalidParams(format!(
                "widths {:?} must be 1 to 6 entries in 1..={MAX_WIDTH}",
                self.widths
            )));
        }
        if !(1..=MAX_WIDTH).contains(&self.latent_dim) {
            return Err(Error::InvalidParams(format!(
                "latent_dim must lie in 1..={MAX_WIDTH}"
            )));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        INTERIOR << self.widths.len()
    }

    pub fn interior_channels(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Per-sample `[features] -> [c, h, w]`.
    Reshape { channels: usize, height: usize, width: usize },
    /// Per-sample `[c, h, w] -> [c * h * w]`.
    Flatten,
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Adjoint of the convolution from the output size back to the input.
    TransposedConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    BatchNorm { channels: usize },
    Activation(Activation),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    /// Generator input projection (not transplanted).
    Projection,
    /// Critic conv stack and the autoencoder encoder.
    Encoder,
    Bridge,
    /// Generator transposed-conv stack and the autoencoder decoder.
    Decoder,
    /// Critic flatten and scalar head (not transplanted).
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub segment: Segment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn suffix(self) -> &'static str {
        match self {
            TensorRole::Weight => "weight",
            TensorRole::Bias => "bias",
            TensorRole::Gamma => "gamma",
            TensorRole::Beta => "beta",
            TensorRole::RunningMean => "running_mean",
            TensorRole::RunningVar => "running_var",
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
    pub layer: usize,
    pub segment: Segment,
}

/// Ordered layers plus the per-sample input shape.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetSpec {
    pub kind: NetKind,
    pub arch: ArchConfig,
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

fn layer(name: impl Into<String>, kind: LayerKind, segment: Segment) -> LayerSpec {
    LayerSpec {
        name: name.into(),
        kind,
        segment,
    }
}

fn conv(in_channels: usize, out_channels: usize, stride: usize) -> LayerKind {
    LayerKind::Conv {
        in_channels,
        out_channels,
        kernel: KERNEL,
        stride,
        padding: KERNEL / 2,
    }
}

fn up(in_channels: usize, out_channels: usize) -> LayerKind {
    LayerKind::TransposedConv {
        in_channels,
        out_channels,
        kernel: KERNEL,
        stride: 2,
        padding: KERNEL / 2,
        output_padding: 1,
    }
}

/// `down1..downN`: stride-2 convs from one channel up to the interior map.
fn encoder_layers(arch: &ArchConfig, batch_norm_from: usize) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let mut c_in = 1;
    for (i, &c) in arch.widths.iter().enumerate() {
        let name = format!("down{}", i + 1);
        out.push(layer(&name, conv(c_in, c, 2), Segment::Encoder));
        if i >= batch_norm_from {
            out.push(layer(
                format!("{name}_bn"),
                LayerKind::BatchNorm { channels: c },
                Segment::Encoder,
            ));
        }
        out.push(layer(
            format!("{name}_act"),
            LayerKind::Activation(Activation::LeakyRelu),
            Segment::Encoder,
        ));
        c_in = c;
    }
    out
}

/// `up1..upN`: stride-2 transposed convs from the interior map to one channel.
fn decoder_layers(arch: &ArchConfig, output: Activation) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let rev: Vec<usize> = arch.widths.iter().rev().copied().collect();
    for i in 0..rev.len() {
        let name = format!("up{}", i + 1);
        let c_out = rev.get(i + 1).copied().unwrap_or(1);
        out.push(layer(&name, up(rev[i], c_out), Segment::Decoder));
        if i + 1 < rev.len() {
            out.push(layer(
                format!("{name}_bn"),
                LayerKind::BatchNorm { channels: c_out },
                Segment::Decoder,
            ));
            out.push(layer(
                format!("{name}_act"),
                LayerKind::Activation(Activation::Relu),
                Segment::Decoder,
            ));
        } else {
            out.push(layer(format!("{name}_act"), LayerKind::Activation(output), Segment::Decoder));
        }
    }
    out
}

impl NetSpec {
    pub fn generator(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let c = arch.interior_channels();
        let features = INTERIOR * INTERIOR * c;
        let mut layers = vec![
            layer(
                "project",
                LayerKind::Dense {
                    in_features: arch.latent_dim,
                    out_features: features,
                },
                Segment::Projection,
            ),
            layer(
                "project_reshape",
                LayerKind::Reshape {
                    channels: c,
                    height: INTERIOR,
                    width: INTERIOR,
                },
                Segment::Projection,
            ),
            layer("project_bn", LayerKind::BatchNorm { channels: c }, Segment::Projection),
            layer("project_act", LayerKind::Activation(Activation::Relu), Segment::Projection),
        ];
        layers.extend(decoder_layers(arch, Activation::Tanh));
        NetSpec::checked(NetKind::Generator, arch, vec![arch.latent_dim], layers)
    }

    pub fn critic(arch: &ArchConfig, loss_mode: LossMode) -> Result<Self> {
        arch.validate()?;
        let bn_from = if loss_mode.critic_has_batch_norm() { 1 } else { usize::MAX };
        let mut layers = encoder_layers(arch, bn_from);
        let c = arch.interior_channels();
        layers.push(layer("flatten", LayerKind::Flatten, Segment::Head));
        layers.push(layer(
            "head",
            LayerKind::Dense {
                in_features: INTERIOR * INTERIOR * c,
                out_features: 1,
            },
            Segment::Head,
        ));
        let head_act = match loss_mode {
            LossMode::Dcgan => Activation::Sigmoid,
            LossMode::WganGp | LossMode::WganClip => Activation::Linear,
        };
        layers.push(layer("head_act", LayerKind::Activation(head_act), Segment::Head));
        let s = arch.image_size();
        NetSpec::checked(NetKind::Critic { loss_mode }, arch, vec![1, s, s], layers)
    }

    pub fn autoencoder(arch: &ArchConfig, variant: AeVariant) -> Result<Self> {
        arch.validate()?;
        let (bn_from, output) = match variant {
            AeVariant::Transfer { loss_mode } => (
                if loss_mode.critic_has_batch_norm() { 1 } else { usize::MAX },
                Activation::Tanh,
            ),
            AeVariant::Scratch => (0, Activation::Sigmoid),
        };
        let c = arch.interior_channels();
        let mut layers = encoder_layers(arch, bn_from);
        layers.push(layer("bridge", conv(c, c, 1), Segment::Bridge));
        layers.push(layer("bridge_bn", LayerKind::BatchNorm { channels: c }, Segment::Bridge));
        layers.push(layer(
            "bridge_act",
            LayerKind::Activation(Activation::LeakyRelu),
            Segment::Bridge,
        ));
        layers.extend(decoder_layers(arch, output));
        let s = arch.image_size();
        NetSpec::checked(NetKind::Autoencoder { variant }, arch, vec![1, s, s], layers)
    }

    pub fn for_kind(kind: NetKind, arch: &ArchConfig) -> Result<Self> {
        match kind {
            NetKind::Generator => NetSpec::generator(arch),
            NetKind::Critic { loss_mode } => NetSpec::critic(arch, loss_mode),
            NetKind::Autoencoder { variant } => NetSpec::autoencoder(arch, variant),
        }
    }

    fn checked(kind: NetKind, arch: &ArchConfig, input: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = NetSpec {
            kind,
            arch: arch.clone(),
            input,
            layers,
        };
        spec.shapes()?;
        Ok(spec)
    }

    /// Per-sample shape after each layer; `[0]` is the input.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![self.input.clone()];
        for l in &self.layers {
            let cur = out.last().expect("non-empty");
            let bad = || {
                Error::ShapeMismatch(format!("layer {} cannot take input {:?}", l.name, cur))
            };
            let next = match &l.kind {
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    if cur != &[*in_features] {
                        return Err(bad());
                    }
                    vec![*out_features]
                }
                LayerKind::Reshape {
                    channels,
                    height,
                    width,
                } => {
                    if cur.iter().product::<usize>() != channels * height * width || cur.len() != 1 {
                        return Err(bad());
                    }
                    vec![*channels, *height, *width]
                }
                LayerKind::Flatten => {
                    if cur.len() != 3 {
                        return Err(bad());
                    }
                    vec![cur.iter().product()]
                }
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.len() != 3 || cur[0] != *in_channels || cur[1] + 2 * padding < *kernel {
                        return Err(bad());
                    }
                    let o = |d: usize| (d + 2 * padding - kernel) / stride + 1;
                    vec![*out_channels, o(cur[1]), o(cur[2])]
                }
                LayerKind::TransposedConv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    output_padding,
                } => {
                    if cur.len() != 3 || cur[0] != *in_channels || cur[1] == 0 {
                        return Err(bad());
                    }
                    let o = |d: usize| (d - 1) * stride + kernel + output_padding - 2 * padding;
                    vec![*out_channels, o(cur[1]), o(cur[2])]
                }
                LayerKind::BatchNorm { channels } => {
                    if cur.is_empty() || cur[0] != *channels {
                        return Err(bad());
                    }
                    cur.clone()
                }
                LayerKind::Activation(_) => cur.clone(),
            };
            out.push(next);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().expect("checked spec").pop().expect("non-empty")
    }

    /// Every stored tensor, in layer order.
    pub fn tensors(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let mut push = |role: TensorRole, shape: Vec<usize>| {
                out.push(TensorSpec {
                    name: format!("{}.{}", l.name, role.suffix()),
                    shape,
                    role,
                    layer: i,
                    segment: l.segment,
                })
            };
            match l.kind {
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    push(TensorRole::Weight, vec![out_features, in_features]);
                    push(TensorRole::Bias, vec![out_features]);
                }
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    push(TensorRole::Weight, vec![out_channels, in_channels, kernel, kernel]);
                    push(TensorRole::Bias, vec![out_channels]);
                }
                LayerKind::TransposedConv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    // laid out as the weight of the forward convolution it reverses
                    push(TensorRole::Weight, vec![in_channels, out_channels, kernel, kernel]);
                    push(TensorRole::Bias, vec![out_channels]);
                }
                LayerKind::BatchNorm { channels } => {
                    push(TensorRole::Gamma, vec![channels]);
                    push(TensorRole::Beta, vec![channels]);
                    push(TensorRole::RunningMean, vec![channels]);
                    push(TensorRole::RunningVar, vec![channels]);
                }
                LayerKind::Reshape { .. } | LayerKind::Flatten | LayerKind::Activation(_) => {}
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.role.trainable())
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
    }

    /// Indices of the layers in `segment`, in order.
    pub fn segment_range(&self, segment: Segment) -> std::ops::Range<usize> {
        let idx: Vec<usize> = (0..self.layers.len())
            .filter(|&i| self.layers[i].segment == segment)
            .collect();
        match (idx.first(), idx.last()) {
            (Some(&a), Some(&b)) => a..b + 1,
            _ => 0..0,
        }
    }
}
