//! Dual-stream building blocks: the mutual gate, the mutually-gated block and the
//! dual-stream fusion block.
//!
//! Feature grids are `(N, C, H, W)` tensors (rank-3 `(C, H, W)` grids are accepted by
//! [`mugi_gate`]). The first stream always carries transmission features and the second
//! reflection features.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, DepthwiseConv3x3, Dual, LayerNorm2d, ParamStore};

/// Aligned transmission-stream and reflection-stream feature grids.
#[derive(Clone, Debug)]
pub struct FeaturePair {
    pub t: Tensor,
    pub r: Tensor,
}

impl FeaturePair {
    pub fn new(t: Tensor, r: Tensor) -> Result<Self> {
        if t.dims() != r.dims() {
            return Err(Error::shape(format!(
                "stream shapes differ: {:?} vs {:?}",
                t.dims(),
                r.dims()
            )));
        }
        Ok(Self { t, r })
    }

    /// Both streams start from the same features.
    pub fn shared(x: Tensor) -> Self {
        Self { t: x.clone(), r: x }
    }

    pub fn swap(self) -> Self {
        Self {
            t: self.r,
            r: self.t,
        }
    }

    pub fn channels(&self) -> Result<usize> {
        Ok(self.t.dim(1)?)
    }

    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.t.dims4()?;
        Ok((h, w))
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            t: f(&self.t)?,
            r: f(&self.r)?,
        })
    }
}

impl Dual<Conv2d> {
    pub fn forward(&self, pair: &FeaturePair) -> Result<FeaturePair> {
        Ok(FeaturePair {
            t: self.t.forward(&pair.t)?,
            r: self.r.forward(&pair.r)?,
        })
    }
}

impl Dual<LayerNorm2d> {
    pub fn forward(&self, pair: &FeaturePair) -> Result<FeaturePair> {
        Ok(FeaturePair {
            t: self.t.forward(&pair.t)?,
            r: self.r.forward(&pair.r)?,
        })
    }
}

impl Dual<DepthwiseConv3x3> {
    pub fn forward(&self, pair: &FeaturePair) -> Result<FeaturePair> {
        Ok(FeaturePair {
            t: self.t.forward(&pair.t)?,
            r: self.r.forward(&pair.r)?,
        })
    }
}

impl Dual<ChannelAttention> {
    pub fn forward(&self, pair: &FeaturePair) -> Result<FeaturePair> {
        Ok(FeaturePair {
            t: self.t.forward(&pair.t)?,
            r: self.r.forward(&pair.r)?,
        })
    }
}

/// Mutual gate: each stream's former channel half is multiplied by the sibling stream's
/// latter half.
///
/// `out_t[c] = f_t[c] * f_r[c + C/2]`, `out_r[c] = f_r[c] * f_t[c + C/2]`.
pub fn mugi_gate(f_t: &Tensor, f_r: &Tensor) -> Result<(Tensor, Tensor)> {
    if f_t.dims() != f_r.dims() {
        return Err(Error::shape(format!(
            "gate streams differ: {:?} vs {:?}",
            f_t.dims(),
            f_r.dims()
        )));
    }
    let axis = channel_axis(f_t)?;
    let c = f_t.dim(axis)?;
    if c % 2 != 0 {
        return Err(Error::InvalidChannels {
            channels: c,
            context: "mutual gate needs an even channel count".into(),
        });
    }
    let half = c / 2;
    let (t_former, t_latter) = (f_t.narrow(axis, 0, half)?, f_t.narrow(axis, half, half)?);
    let (r_former, r_latter) = (f_r.narrow(axis, 0, half)?, f_r.narrow(axis, half, half)?);
    Ok(((t_former * r_latter)?, (r_former * t_latter)?))
}

fn channel_axis(t: &Tensor) -> Result<usize> {
    match t.rank() {
        3 => Ok(0),
        4 => Ok(1),
        r => Err(Error::shape(format!("feature grids are rank 3 or 4, got rank {r}"))),
    }
}

/// How the two streams exchange information at each gate site.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionMode {
    /// Mutual gating.
    #[default]
    Mugi,
    /// ReLU activation exchange: each stream keeps its positive part and receives the
    /// sibling's negative part, then a per-stream 1x1 convolution halves the channels.
    Ytmt,
    /// No exchange: independent per-stream 1x1 halving convolutions.
    Off,
}

impl std::str::FromStr for InteractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mugi" => Ok(Self::Mugi),
            "ytmt" => Ok(Self::Ytmt),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown interaction mode {other:?}"))),
        }
    }
}

/// One channel-halving interaction point inside a block.
#[derive(Clone, Debug)]
pub enum GateSite {
    Mugi,
    Ytmt { halve: Dual<Conv2d> },
    Parallel { halve: Dual<Conv2d> },
}

impl GateSite {
    fn new(store: &mut ParamStore, name: &str, mode: InteractionMode, width: usize, tied: bool) -> Result<Self> {
        let mut halve = || {
            store.dual(&format!("{name}.halve"), tied, |s, n| {
                s.conv2d(n, ConvSpec::pointwise(2 * width, width))
            })
        };
        Ok(match mode {
            InteractionMode::Mugi => GateSite::Mugi,
            InteractionMode::Ytmt => GateSite::Ytmt { halve: halve()? },
            InteractionMode::Off => GateSite::Parallel { halve: halve()? },
        })
    }

    pub fn forward(&self, pair: &FeaturePair) -> Result<FeaturePair> {
        match self {
            GateSite::Mugi => {
                let (t, r) = mugi_gate(&pair.t, &pair.r)?;
                Ok(FeaturePair { t, r })
            }
            GateSite::Ytmt { halve } => {
                let (pos_t, pos_r) = (pair.t.relu()?, pair.r.relu()?);
                let neg_t = (&pair.t - &pos_t)?;
                let neg_r = (&pair.r - &pos_r)?;
                let exchanged = FeaturePair {
                    t: (pos_t + neg_r)?,
                    r: (pos_r + neg_t)?,
                };
                halve.forward(&exchanged)
            }
            GateSite::Parallel { halve } => halve.forward(pair),
        }
    }
}

/// Simplified channel attention: global average pool, 1x1 convolution, per-channel scale.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub conv: Conv2d,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: store.conv2d(&format!("{name}.conv"), ConvSpec::pointwise(channels, channels))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean_keepdim((2, 3))?;
        let scale = self.conv.forward(&pooled)?;
        Ok(x.broadcast_mul(&scale)?)
    }
}

/// Scales `f` per channel by a learned function of its spatially averaged descriptor.
pub fn channel_attention(f: &Tensor, attention: &ChannelAttention) -> Result<Tensor> {
    attention.forward(f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub width: usize,
    pub interaction: InteractionMode,
    pub tied: bool,
}

impl BlockConfig {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            interaction: InteractionMode::Mugi,
            tied: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!(
                "block width must be a positive even number, got {}",
                self.width
            )));
        }
        Ok(())
    }
}

/// Dual-stream mutually-gated block.
///
/// Stage one per stream: norm, 1x1 expansion to twice the width, 3x3 depthwise mixing,
/// gate (cross-stream), channel attention, 1x1 projection, residual add. Stage two:
/// norm, 1x1 expansion, gate, 1x1 projection, residual add.
#[derive(Clone, Debug)]
pub struct MugiBlock {
    pub width: usize,
    pub norm1: Dual<LayerNorm2d>,
    pub expand1: Dual<Conv2d>,
    pub mix: Dual<DepthwiseConv3x3>,
    pub gate1: GateSite,
    pub attention: Dual<ChannelAttention>,
    pub project1: Dual<Conv2d>,
    pub norm2: Dual<LayerNorm2d>,
    pub expand2: Dual<Conv2d>,
    pub gate2: GateSite,
    pub project2: Dual<Conv2d>,
}

impl MugiBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: &BlockConfig) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let tied = config.tied;
        let p = |s: &str| format!("{name}.{s}");
        Ok(Self {
            width: c,
            norm1: store.dual(&p("norm1"), tied, |s, n| s.layer_norm(n, c))?,
            expand1: store.dual(&p("expand1"), tied, |s, n| s.conv2d(n, ConvSpec::pointwise(c, 2 * c)))?,
            mix: store.dual(&p("mix"), tied, |s, n| s.depthwise3x3(n, 2 * c))?,
            gate1: GateSite::new(store, &p("gate1"), config.interaction, c, tied)?,
            attention: store.dual(&p("attention"), tied, |s, n| ChannelAttention::new(s, n, c))?,
            project1: store.dual(&p("project1"), tied, |s, n| s.conv2d(n, ConvSpec::pointwise(c, c)))?,
            norm2: store.dual(&p("norm2"), tied, |s, n| s.layer_norm(n, c))?,
            expand2: store.dual(&p("expand2"), tied, |s, n| s.conv2d(n, ConvSpec::pointwise(c, 2 * c)))?,
            gate2: GateSite::new(store, &p("gate2"), config.interaction, c, tied)?,
            project2: store.dual(&p("project2"), tied, |s, n| s.conv2d(n, ConvSpec::pointwise(c, c)))?,
        })
    }

    pub fn forward(&self, pair: &FeaturePair) -> Result<FeaturePair> {
        let c = pair.channels()?;
        if c != self.width {
            return Err(Error::shape(format!(
                "block of width {} applied to {c} channels",
                self.width
            )));
        }
        let x = self.norm1.forward(pair)?;
        let x = self.expand1.forward(&x)?;
        let x = self.mix.forward(&x)?;
        let x = self.gate1.forward(&x)?;
        let x = self.attention.forward(&x)?;
        let x = self.project1.forward(&x)?;
        let y = FeaturePair {
            t: (&pair.t + &x.t)?,
            r: (&pair.r + &x.r)?,
        };
        let x = self.norm2.forward(&y)?;
        let x = self.expand2.forward(&x)?;
        let x = self.gate2.forward(&x)?;
        let x = self.project2.forward(&x)?;
        Ok(FeaturePair {
            t: (&y.t + &x.t)?,
            r: (&y.r + &x.r)?,
        })
    }
}

/// Runs a chain of blocks.
pub fn run_blocks(blocks: &[MugiBlock], pair: FeaturePair) -> Result<FeaturePair> {
    blocks.iter().try_fold(pair, |acc, b| b.forward(&acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DsfConfig {
    pub deep_width: usize,
    pub shallow_width: usize,
    pub out_width: usize,
    pub tied: bool,
}

/// Dual-stream fusion block: per stream, the deeper pair is upscaled x2 and convolved
/// ("dual conv"), concatenated with the shallower pair and fused by a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct DsfBlock {
    pub config: DsfConfig,
    pub upconv: Dual<Conv2d>,
    pub fuse: Dual<Conv2d>,
}

impl DsfBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: DsfConfig) -> Result<Self> {
        if config.deep_width == 0 || config.shallow_width == 0 || config.out_width == 0 {
            return Err(Error::Config(format!("fusion widths must be positive: {config:?}")));
        }
        let up_width = config.shallow_width;
        Ok(Self {
            config,
            upconv: store.dual(&format!("{name}.upconv"), config.tied, |s, n| {
                s.conv2d(n, ConvSpec::new(config.deep_width, up_width, 3))
            })?,
            fuse: store.dual(&format!("{name}.fuse"), config.tied, |s, n| {
                s.conv2d(n, ConvSpec::pointwise(up_width + config.shallow_width, config.out_width))
            })?,
        })
    }

    pub fn forward(&self, deep: &FeaturePair, shallow: &FeaturePair) -> Result<FeaturePair> {
        let (dh, dw) = deep.spatial()?;
        let (sh, sw) = shallow.spatial()?;
        if 2 * dh != sh || 2 * dw != sw {
            return Err(Error::shape(format!(
                "fusion needs deep features at half the shallow size, got {dh}x{dw} and {sh}x{sw}"
            )));
        }
        let up = deep.map(|x| crate::nn::upsample2x(x))?;
        let up = self.upconv.forward(&up)?;
        let cat = FeaturePair {
            t: Tensor::cat(&[&up.t, &shallow.t], 1)?,
            r: Tensor::cat(&[&up.r, &shallow.r], 1)?,
        };
        self.fuse.forward(&cat)
    }
}

/// A standalone block with its own parameter store, for experiments and tests.
pub fn init_block_params(config: &BlockConfig, seed: u64, dtype: DType) -> Result<(ParamStore, MugiBlock)> {
    let mut store = ParamStore::new(seed, dtype, &Device::Cpu);
    let block = MugiBlock::new(&mut store, "block", config)?;
    Ok((store, block))
}
