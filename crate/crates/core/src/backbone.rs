//! Frozen VGG-style hierarchical feature extractor.
//!
//! The extractor has five convolution stages separated by 2x2 max pooling. The features
//! handed to the pyramid encoder are the last ReLU activation of every stage (strides 1,
//! 2, 4, 8, 16). The perceptual loss reads the first ReLU activation of every stage,
//! which for the 19-layer layout are layers 2, 7, 12, 21 and 30 of the torchvision
//! `features` sequence (counted one-based).

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;

pub const STAGES: usize = 5;

/// Environment variable overriding the configured weights file.
pub const WEIGHTS_ENV: &str = "DSRNET_BACKBONE_WEIGHTS";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each stage.
    pub widths: [usize; STAGES],
    /// Number of 3x3 convolutions in each stage.
    pub convs: [usize; STAGES],
}

impl BackboneConfig {
    /// The 19-layer layout.
    pub fn vgg19() -> Self {
        Self {
            widths: [64, 128, 256, 512, 512],
            convs: [2, 2, 4, 4, 4],
        }
    }

    /// Same layout with every width divided by `factor`.
    pub fn vgg19_narrow(factor: usize) -> Self {
        let mut cfg = Self::vgg19();
        for w in cfg.widths.iter_mut() {
            *w = (*w / factor).max(2);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) || self.convs.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!("backbone stages must be non-empty: {self:?}")));
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::vgg19()
    }
}

/// Where backbone weights come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSource {
    /// Seeded random weights; for tests and offline experiments.
    Random { seed: u64 },
    /// A safetensors file with torchvision-style `features.{i}.weight` / `.bias` keys.
    File { path: PathBuf },
}

/// Features at strides 1, 2, 4, 8 and 16, shallowest first.
#[derive(Clone, Debug)]
pub struct BackboneFeatures(pub Vec<Tensor>);

impl BackboneFeatures {
    pub fn levels(&self) -> &[Tensor] {
        &self.0
    }
}

/// Something that maps an image batch to a list of feature taps for the perceptual loss.
pub trait FeatureExtractor {
    fn taps(&self, x: &Tensor) -> Result<Vec<Tensor>>;

    /// The first `count` taps; extractors may skip the work for later ones.
    fn leading_taps(&self, x: &Tensor, count: usize) -> Result<Vec<Tensor>> {
        let mut all = self.taps(x)?;
        all.truncate(count);
        Ok(all)
    }
}

/// Returns the image itself as the only tap.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn taps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Vec<Conv2d>>,
    mean: Tensor,
    std: Tensor,
}

impl Backbone {
    pub fn random(config: &BackboneConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(STAGES);
        let mut cin = 3;
        for (&width, &convs) in config.widths.iter().zip(config.convs.iter()) {
            let mut stage = Vec::with_capacity(convs);
            for _ in 0..convs {
                // He-uniform keeps ReLU activations from shrinking through the stack.
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let w: Vec<f64> = (0..width * cin * 9).map(|_| rng.random_range(-bound..=bound)).collect();
                stage.push(Conv2d {
                    weight: Tensor::from_vec(w, (width, cin, 3, 3), device)?.to_dtype(dtype)?,
                    bias: Some(Tensor::zeros(width, dtype, device)?),
                    stride: 1,
                    padding: 1,
                });
                cin = width;
            }
            stages.push(stage);
        }
        Self::assemble(config.clone(), stages, dtype, device)
    }

    /// Loads torchvision-layout weights; `config` determines which keys are read.
    pub fn from_safetensors(path: &Path, config: &BackboneConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        if !path.is_file() {
            return Err(Error::Resource(format!(
                "backbone weights not found at {}",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::Resource(format!("cannot read backbone weights {}: {e}", path.display())))?;
        let mut index = 0;
        let mut cin = 3;
        let mut stages = Vec::with_capacity(STAGES);
        for (&width, &convs) in config.widths.iter().zip(config.convs.iter()) {
            let mut stage = Vec::with_capacity(convs);
            for _ in 0..convs {
                let fetch = |suffix: &str| -> Result<Tensor> {
                    let key = format!("features.{index}.{suffix}");
                    let t = tensors
                        .get(&key)
                        .ok_or_else(|| Error::Resource(format!("backbone weights lack {key}")))?;
                    Ok(t.to_dtype(dtype)?)
                };
                let weight = fetch("weight")?;
                if weight.dims() != [width, cin, 3, 3] {
                    return Err(Error::Resource(format!(
                        "backbone layer {index} has shape {:?}, expected {:?}",
                        weight.dims(),
                        [width, cin, 3, 3]
                    )));
                }
                stage.push(Conv2d {
                    weight,
                    bias: Some(fetch("bias")?),
                    stride: 1,
                    padding: 1,
                });
                cin = width;
                index += 2;
            }
            index += 1;
            stages.push(stage);
        }
        Self::assemble(config.clone(), stages, dtype, device)
    }

    /// Resolves a source, letting [`WEIGHTS_ENV`] override a file path.
    pub fn load(source: &BackboneSource, config: &BackboneConfig, dtype: DType, device: &Device) -> Result<Self> {
        match source {
            BackboneSource::Random { seed } => Self::random(config, *seed, dtype, device),
            BackboneSource::File { path } => {
                let path = std::env::var_os(WEIGHTS_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| path.clone());
                Self::from_safetensors(&path, config, dtype, device)
            }
        }
    }

    fn assemble(config: BackboneConfig, stages: Vec<Vec<Conv2d>>, dtype: DType, device: &Device) -> Result<Self> {
        let mean = Tensor::from_vec(IMAGENET_MEAN.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(IMAGENET_STD.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        Ok(Self {
            config,
            stages,
            mean,
            std,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(1)? != 3 {
            return Err(Error::shape(format!("backbone expects RGB input, got {:?}", x.dims())));
        }
        Ok(x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }

    /// Last activation of every stage, at strides 1, 2, 4, 8 and 16.
    pub fn extract(&self, image: &Tensor) -> Result<BackboneFeatures> {
        let (_, _, h, w) = image.dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(format!(
                "backbone input {h}x{w} must be divisible by 16"
            )));
        }
        let mut x = self.normalize(image)?;
        let mut out = Vec::with_capacity(STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = crate::nn::max_pool2x2(&x)?;
            }
            for conv in stage {
                x = conv.forward(&x)?.relu()?;
            }
            out.push(x.clone());
        }
        Ok(BackboneFeatures(out))
    }
}

impl FeatureExtractor for Backbone {
    /// First activation of every stage.
    fn taps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.leading_taps(image, STAGES)
    }

    fn leading_taps(&self, image: &Tensor, count: usize) -> Result<Vec<Tensor>> {
        let mut x = self.normalize(image)?;
        if count == 0 {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = crate::nn::max_pool2x2(&x)?;
            }
            for (j, conv) in stage.iter().enumerate() {
                x = conv.forward(&x)?.relu()?;
                if j == 0 {
                    out.push(x.clone());
                    if out.len() == count {
                        return Ok(out);
                    }
                }
            }
        }
        Ok(out)
    }
}
