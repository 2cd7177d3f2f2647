//! The two-stage decomposition network and its learnable residue module.
//!
//! Stage one (the pyramid encoder) turns backbone features into a rough dual-stream
//! decomposition at input resolution. Stage two is a U-shaped stack of mutually-gated
//! blocks ending in one 3-channel head per stream. The residue module reads the
//! features that feed the heads and predicts a `tanh`-bounded correction term; it never
//! feeds back into the layer predictions.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneFeatures, STAGES};
use crate::blocks::{run_blocks, BlockConfig, DsfBlock, DsfConfig, FeaturePair, InteractionMode, MugiBlock};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Conv2d, ConvSpec, Dual, ParamStore};

/// Spatial multiple every network input must satisfy.
pub const SIZE_MULTIPLE: usize = 16;

/// Residue pre-activations are clamped here so `tanh` stays strictly inside (-1, 1) in f32.
const RESIDUE_PREACT_LIMIT: f64 = 8.0;

/// Semantic encoder feeding the decomposition stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Bottom-up pyramid fusion of backbone features.
    #[default]
    Dsfnet,
    /// Upsample every backbone level to input size, concatenate, 1x1 project.
    Hypercolumn,
    /// RGB convolutions only.
    Off,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsfnet" => Ok(Self::Dsfnet),
            "hypercolumn" => Ok(Self::Hypercolumn),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown encoder {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel width at full resolution; doubles at every U level.
    pub base_width: usize,
    /// Number of resolutions in the U-shaped stage.
    pub dsd_levels: usize,
    /// Blocks per level on each side of the U (and in its bottleneck).
    pub blocks_per_level: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderKind,
    pub interaction: InteractionMode,
    /// Initialize both streams of every per-stream layer identically.
    pub tied_streams: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            dsd_levels: 3,
            blocks_per_level: 2,
            backbone: BackboneConfig::vgg19(),
            encoder: EncoderKind::Dsfnet,
            interaction: InteractionMode::Mugi,
            tied_streams: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU experiments: the given base width and a backbone four
    /// times narrower than the 19-layer one.
    pub fn compact(base_width: usize) -> Self {
        Self {
            base_width,
            backbone: BackboneConfig::vgg19_narrow(4),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.base_width == 0 || self.base_width % 2 != 0 {
            return Err(Error::Config(format!(
                "base width must be a positive even number, got {}",
                self.base_width
            )));
        }
        if self.dsd_levels == 0 || self.dsd_levels > 5 {
            return Err(Error::Config(format!("dsd_levels must be in 1..=5, got {}", self.dsd_levels)));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::Config("blocks_per_level must be at least 1".into()));
        }
        if self.encoder == EncoderKind::Dsfnet {
            if let Some(w) = self.backbone.widths.iter().find(|&&w| w % 2 != 0) {
                return Err(Error::Config(format!(
                    "pyramid encoder gates backbone features directly; width {w} is odd"
                )));
            }
        }
        Ok(())
    }

    fn block(&self, width: usize) -> BlockConfig {
        BlockConfig {
            width,
            interaction: self.interaction,
            tied: self.tied_streams,
        }
    }

    pub fn uses_backbone_features(&self) -> bool {
        self.encoder != EncoderKind::Off
    }
}

/// Two 3x3 convolutions with a ReLU between them, straight from the RGB input.
#[derive(Clone, Debug)]
pub struct RgbStem {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl RgbStem {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            conv1: store.conv2d(&format!("{name}.conv1"), ConvSpec::new(3, width, 3))?,
            conv2: store.conv2d(&format!("{name}.conv2"), ConvSpec::new(width, width, 3))?,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let x = self.conv1.forward(image)?.relu()?;
        self.conv2.forward(&x)
    }
}

/// Stage one: bottom-up dual-stream pyramid fusion of backbone features.
#[derive(Clone, Debug)]
pub struct DsfNet {
    /// One block per backbone level, run with identical stream inputs.
    pub level_blocks: Vec<MugiBlock>,
    /// `fusions[i]` merges the running deeper pair into level `i`.
    pub fusions: Vec<DsfBlock>,
    pub cross_blocks: Vec<MugiBlock>,
    pub stem: RgbStem,
    pub top_fuse: Dual<Conv2d>,
    pub top_block: MugiBlock,
}

impl DsfNet {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let widths = cfg.backbone.widths;
        let tied = cfg.tied_streams;
        let level_blocks = (0..STAGES)
            .map(|i| MugiBlock::new(store, &format!("dsf.level{i}"), &cfg.block(widths[i])))
            .collect::<Result<Vec<_>>>()?;
        let mut fusions = Vec::with_capacity(STAGES - 1);
        let mut cross_blocks = Vec::with_capacity(STAGES - 1);
        for i in 0..STAGES - 1 {
            fusions.push(DsfBlock::new(
                store,
                &format!("dsf.fuse{i}"),
                DsfConfig {
                    deep_width: widths[i + 1],
                    shallow_width: widths[i],
                    out_width: widths[i],
                    tied,
                },
            )?);
            cross_blocks.push(MugiBlock::new(store, &format!("dsf.cross{i}"), &cfg.block(widths[i]))?);
        }
        let base = cfg.base_width;
        let stem = RgbStem::new(store, "dsf.stem", base)?;
        let top_fuse = store.dual("dsf.top_fuse", tied, |s, n| {
            s.conv2d(n, ConvSpec::pointwise(widths[0] + base, base))
        })?;
        let top_block = MugiBlock::new(store, "dsf.top_block", &cfg.block(base))?;
        Ok(Self {
            level_blocks,
            fusions,
            cross_blocks,
            stem,
            top_fuse,
            top_block,
        })
    }

    pub fn forward(&self, image: &Tensor, feats: &BackboneFeatures) -> Result<FeaturePair> {
        let levels = feats.levels();
        if levels.len() != STAGES {
            return Err(Error::shape(format!("expected {STAGES} backbone levels, got {}", levels.len())));
        }
        let (_, _, h, w) = image.dims4()?;
        if levels[0].dims4()?.2 != h || levels[0].dims4()?.3 != w {
            return Err(Error::shape("backbone features do not match the image size"));
        }
        let pairs = levels
            .iter()
            .zip(&self.level_blocks)
            .map(|(f, block)| block.forward(&FeaturePair::shared(f.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut current = pairs[STAGES - 1].clone();
        for i in (0..STAGES - 1).rev() {
            current = self.fusions[i].forward(&current, &pairs[i])?;
            current = self.cross_blocks[i].forward(&current)?;
        }
        let stem = self.stem.forward(image)?;
        let fused = FeaturePair {
            t: Tensor::cat(&[&current.t, &stem], 1)?,
            r: Tensor::cat(&[&current.r, &stem], 1)?,
        };
        let fused = self.top_fuse.forward(&fused)?;
        self.top_block.forward(&fused)
    }
}

/// Ablation encoder: every backbone level upsampled to input size, concatenated with the
/// image and projected by one 1x1 convolution; both streams receive the result.
#[derive(Clone, Debug)]
pub struct HyperColumn {
    pub project: Conv2d,
}

impl HyperColumn {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let cin = 3 + cfg.backbone.widths.iter().sum::<usize>();
        Ok(Self {
            project: store.conv2d("hypercolumn.project", ConvSpec::pointwise(cin, cfg.base_width))?,
        })
    }

    pub fn forward(&self, image: &Tensor, feats: &BackboneFeatures) -> Result<FeaturePair> {
        let (_, _, h, _) = image.dims4()?;
        let mut parts = vec![image.clone()];
        for f in feats.levels() {
            parts.push(nn::upsample_nearest(f, h / f.dim(2)?)?);
        }
        let x = Tensor::cat(&parts, 1)?;
        Ok(FeaturePair::shared(self.project.forward(&x)?))
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Dsfnet(DsfNet),
    Hypercolumn(HyperColumn),
    Plain(RgbStem),
}

/// Stage two output.
#[derive(Clone, Debug)]
pub struct DsdOutput {
    /// Full-resolution dual features entering the output heads (and the residue module).
    pub prefinal: FeaturePair,
    /// Unclipped transmission prediction.
    pub transmission: Tensor,
    /// Unclipped reflection prediction.
    pub reflection: Tensor,
}

/// Stage two: U-shaped refinement built from mutually-gated blocks.
#[derive(Clone, Debug)]
pub struct DsdNet {
    pub width: usize,
    pub encoders: Vec<Vec<MugiBlock>>,
    pub downs: Vec<Dual<Conv2d>>,
    pub middle: Vec<MugiBlock>,
    pub ups: Vec<Dual<Conv2d>>,
    pub skip_fuse: Vec<Dual<Conv2d>>,
    pub decoders: Vec<Vec<MugiBlock>>,
    pub head: Dual<Conv2d>,
}

impl DsdNet {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let tied = cfg.tied_streams;
        let n = cfg.blocks_per_level;
        let width_at = |level: usize| cfg.base_width << level;
        let blocks = |store: &mut ParamStore, name: String, width: usize| -> Result<Vec<MugiBlock>> {
            (0..n)
                .map(|b| MugiBlock::new(store, &format!("{name}.b{b}"), &cfg.block(width)))
                .collect()
        };
        let bottom = cfg.dsd_levels - 1;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for level in 0..bottom {
            let w = width_at(level);
            encoders.push(blocks(store, format!("dsd.enc{level}"), w)?);
            downs.push(store.dual(&format!("dsd.down{level}"), tied, |s, name| {
                s.conv2d(name, ConvSpec::new(w, 2 * w, 2).with_stride(2).with_padding(0))
            })?);
        }
        let middle = blocks(store, "dsd.middle".into(), width_at(bottom))?;
        let mut ups = Vec::new();
        let mut skip_fuse = Vec::new();
        let mut decoders = Vec::new();
        for level in (0..bottom).rev() {
            let w = width_at(level);
            ups.push(store.dual(&format!("dsd.up{level}"), tied, |s, name| {
                s.conv2d(name, ConvSpec::new(2 * w, w, 3))
            })?);
            skip_fuse.push(store.dual(&format!("dsd.skip{level}"), tied, |s, name| {
                s.conv2d(name, ConvSpec::pointwise(2 * w, w))
            })?);
            decoders.push(blocks(store, format!("dsd.dec{level}"), w)?);
        }
        let head = store.dual("dsd.head", tied, |s, name| {
            s.conv2d(name, ConvSpec::new(cfg.base_width, 3, 3))
        })?;
        Ok(Self {
            width: cfg.base_width,
            encoders,
            downs,
            middle,
            ups,
            skip_fuse,
            decoders,
            head,
        })
    }

    pub fn forward(&self, pair: &FeaturePair) -> Result<DsdOutput> {
        let c = pair.channels()?;
        if c != self.width {
            return Err(Error::shape(format!(
                "decomposition stage expects width {}, got {c}",
                self.width
            )));
        }
        let (h, w) = pair.spatial()?;
        let multiple = 1 << self.downs.len();
        if h % multiple != 0 || w % multiple != 0 {
            return Err(Error::shape(format!("{h}x{w} is not divisible by {multiple}")));
        }
        let mut x = pair.clone();
        let mut skips = Vec::with_capacity(self.encoders.len());
        for (blocks, down) in self.encoders.iter().zip(&self.downs) {
            x = run_blocks(blocks, x)?;
            skips.push(x.clone());
            x = down.forward(&x)?;
        }
        x = run_blocks(&self.middle, x)?;
        for ((up, fuse), blocks) in self.ups.iter().zip(&self.skip_fuse).zip(&self.decoders) {
            let skip = skips.pop().expect("one skip per decoder level");
            let upsampled = up.forward(&x.map(nn::upsample2x)?)?;
            let cat = FeaturePair {
                t: Tensor::cat(&[&upsampled.t, &skip.t], 1)?,
                r: Tensor::cat(&[&upsampled.r, &skip.r], 1)?,
            };
            x = run_blocks(blocks, fuse.forward(&cat)?)?;
        }
        let out = self.head.forward(&x)?;
        Ok(DsdOutput {
            prefinal: x,
            transmission: out.t,
            reflection: out.r,
        })
    }
}

/// Learnable residue module: an interactive block, stream concatenation, two fusion
/// convolutions and a `tanh` output.
#[derive(Clone, Debug)]
pub struct ResidueModule {
    pub interact: MugiBlock,
    pub fuse1: Conv2d,
    pub fuse2: Conv2d,
}

impl ResidueModule {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.base_width;
        Ok(Self {
            interact: MugiBlock::new(store, "lrm.interact", &cfg.block(w))?,
            fuse1: store.conv2d("lrm.fuse1", ConvSpec::new(2 * w, w, 3))?,
            fuse2: store.conv2d("lrm.fuse2", ConvSpec::new(w, 3, 3))?,
        })
    }

    pub fn forward(&self, prefinal: &FeaturePair) -> Result<Tensor> {
        let x = self.interact.forward(prefinal)?;
        let x = Tensor::cat(&[&x.t, &x.r], 1)?;
        let x = self.fuse1.forward(&x)?.silu()?;
        let x = self.fuse2.forward(&x)?;
        Ok(x.clamp(-RESIDUE_PREACT_LIMIT, RESIDUE_PREACT_LIMIT)?.tanh()?)
    }
}

/// Network outputs as tensors; predictions are unclipped.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub transmission: Tensor,
    pub reflection: Tensor,
    /// All-zero when the residue branch was skipped.
    pub residue: Tensor,
}

/// Clipped images produced by [`DsrNet::infer`].
#[derive(Clone, Debug)]
pub struct DecomposedImage {
    pub transmission: Image,
    pub reflection: Image,
    /// Raw residue values in (-1, 1); all-zero when the residue branch was skipped.
    pub residue: Image,
}

pub struct DsrNet {
    config: ModelConfig,
    store: ParamStore,
    pub encoder: Encoder,
    pub dsd: DsdNet,
    pub lrm: ResidueModule,
}

impl DsrNet {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, device);
        let encoder = match config.encoder {
            EncoderKind::Dsfnet => Encoder::Dsfnet(DsfNet::new(&mut store, config)?),
            EncoderKind::Hypercolumn => Encoder::Hypercolumn(HyperColumn::new(&mut store, config)?),
            EncoderKind::Off => Encoder::Plain(RgbStem::new(&mut store, "plain.stem", config.base_width)?),
        };
        let dsd = DsdNet::new(&mut store, config)?;
        let lrm = ResidueModule::new(&mut store, config)?;
        Ok(Self {
            config: config.clone(),
            store,
            encoder,
            dsd,
            lrm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Stage-one features for an `(N, 3, H, W)` batch.
    pub fn encode(&self, image: &Tensor, backbone: &Backbone) -> Result<FeaturePair> {
        match &self.encoder {
            Encoder::Dsfnet(net) => net.forward(image, &backbone.extract(image)?),
            Encoder::Hypercolumn(hc) => hc.forward(image, &backbone.extract(image)?),
            Encoder::Plain(stem) => Ok(FeaturePair::shared(stem.forward(image)?)),
        }
    }

    /// Full forward pass on an `(N, 3, H, W)` batch with `H`, `W` divisible by 16.
    pub fn forward(&self, image: &Tensor, backbone: &Backbone, with_residue: bool) -> Result<Decomposition> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected an RGB batch, got {c} channels")));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "network input {h}x{w} must be divisible by {SIZE_MULTIPLE}; use infer() for arbitrary sizes"
            )));
        }
        let features = self.encode(image, backbone)?;
        let out = self.dsd.forward(&features)?;
        let residue = if with_residue {
            self.lrm.forward(&out.prefinal)?
        } else {
            out.transmission.zeros_like()?
        };
        Ok(Decomposition {
            transmission: out.transmission,
            reflection: out.reflection,
            residue,
        })
    }

    /// Arbitrary-size inference: reflect-pads to a multiple of 16, runs the network and
    /// crops back. Layer predictions are clipped to `[0, 1]`.
    pub fn infer(&self, image: &Image, backbone: &Backbone, with_residue: bool) -> Result<DecomposedImage> {
        let (h, w) = image.dims();
        let pad_h = (SIZE_MULTIPLE - h % SIZE_MULTIPLE) % SIZE_MULTIPLE;
        let pad_w = (SIZE_MULTIPLE - w % SIZE_MULTIPLE) % SIZE_MULTIPLE;
        let x = image.to_tensor(self.dtype(), self.store.device())?;
        let x = nn::reflect_pad_bottom_right(&x, pad_h, pad_w)?;
        let out = self.forward(&x, backbone, with_residue)?;
        let crop = |t: &Tensor| -> Result<Image> {
            Image::from_tensor(&t.narrow(2, 0, h)?.narrow(3, 0, w)?)
        };
        Ok(DecomposedImage {
            transmission: crop(&out.transmission)?.clamped(),
            reflection: crop(&out.reflection)?.clamped(),
            residue: crop(&out.residue)?,
        })
    }
}

/// Builds a model with its parameters; the same `(config, seed)` always yields identical values.
pub fn init_model_params(config: &ModelConfig, seed: u64, dtype: DType) -> Result<DsrNet> {
    DsrNet::new(config, seed, dtype, &Device::Cpu)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_width: 4,
            dsd_levels: 2,
            blocks_per_level: 1,
            backbone: BackboneConfig {
                widths: [4, 4, 6, 6, 8],
                convs: [1, 1, 1, 1, 1],
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn odd_widths_rejected() {
        let mut cfg = tiny();
        cfg.base_width = 5;
        assert!(matches!(init_model_params(&cfg, 0, DType::F32), Err(Error::Config(_))));
        let mut cfg = tiny();
        cfg.backbone.widths[2] = 7;
        assert!(matches!(init_model_params(&cfg, 0, DType::F32), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_residue_range() {
        let cfg = tiny();
        let net = init_model_params(&cfg, 1, DType::F32).unwrap();
        let bb = Backbone::random(&cfg.backbone, 2, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let d = net.forward(&x, &bb, true).unwrap();
        for t in [&d.transmission, &d.reflection, &d.residue] {
            assert_eq!(t.dims(), &[1, 3, 32, 32]);
        }
        let m: f32 = d.residue.abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(m < 1.0);
    }

    #[test]
    fn infer_handles_odd_sizes() {
        let cfg = tiny();
        let net = init_model_params(&cfg, 1, DType::F32).unwrap();
        let bb = Backbone::random(&cfg.backbone, 2, DType::F32, &Device::Cpu).unwrap();
        let img = Image::from_fn(21, 35, |y, x, c| ((y * 3 + x + c) % 17) as f64 / 16.0);
        let out = net.infer(&img, &bb, true).unwrap();
        assert_eq!(out.transmission.dims(), (21, 35));
        assert_eq!(out.residue.dims(), (21, 35));
        assert!(out.transmission.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unpadded_forward_rejects_indivisible() {
        let cfg = tiny();
        let net = init_model_params(&cfg, 1, DType::F32).unwrap();
        let bb = Backbone::random(&cfg.backbone, 2, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 50, 50), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x, &bb, false), Err(Error::Shape(_))));
    }
}
