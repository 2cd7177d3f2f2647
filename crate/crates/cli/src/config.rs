//! Flat TOML run files for `train`; command-line values win over file values.

use std::path::{Path, PathBuf};

use dsrnet::backbone::{BackboneConfig, BackboneSource};
use dsrnet::blocks::InteractionMode;
use dsrnet::losses::ReconstructionMode;
use dsrnet::model::EncoderKind;
use dsrnet::train::{Precision, TrainConfig};
use dsrnet::{Error, Result};
use serde::Deserialize;

/// Every key a `train` run file may set. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    /// Manifest to train on (repeatable; records are concatenated)
    #[arg(long = "manifest")]
    #[serde(default)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Training log path (default: <checkpoint-dir>/train_log.jsonl)
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Checkpoint every N epochs (the last one is always written)
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Square crop size, or 0 for whole images trimmed to a multiple of 16
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub flip: Option<bool>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub dsd_levels: Option<usize>,
    #[arg(long)]
    pub blocks_per_level: Option<usize>,
    #[arg(long)]
    pub tied_streams: Option<bool>,
    /// Divide every backbone width by this factor (1 = full 19-layer widths)
    #[arg(long)]
    pub backbone_narrow: Option<usize>,
    /// Pretrained backbone weights (safetensors, torchvision key layout)
    #[arg(long)]
    pub backbone_weights: Option<PathBuf>,
    /// Seed for a randomly initialized backbone when no weights are given
    #[arg(long)]
    pub backbone_seed: Option<u64>,
    #[arg(long)]
    pub encoder: Option<String>,
    #[arg(long)]
    pub interaction: Option<String>,
    #[arg(long)]
    pub reconstruction: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta_perceptual: Option<f64>,
    #[arg(long)]
    pub beta_exclusion: Option<f64>,
    #[arg(long)]
    pub beta_reconstruction: Option<f64>,
    #[arg(long)]
    pub exclusion_scales: Option<usize>,
}

fn pick<T: Clone>(cli: &Option<T>, file: &Option<T>) -> Option<T> {
    cli.clone().or_else(|| file.clone())
}

impl TrainOverrides {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Resource(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `self` (command line) layered over `file`.
    pub fn over(self, file: TrainOverrides) -> TrainOverrides {
        TrainOverrides {
            manifests: if self.manifests.is_empty() { file.manifests } else { self.manifests },
            checkpoint_dir: pick(&self.checkpoint_dir, &file.checkpoint_dir),
            log: pick(&self.log, &file.log),
            epochs: pick(&self.epochs, &file.epochs),
            max_steps: pick(&self.max_steps, &file.max_steps),
            checkpoint_every: pick(&self.checkpoint_every, &file.checkpoint_every),
            lr: pick(&self.lr, &file.lr),
            batch_size: pick(&self.batch_size, &file.batch_size),
            seed: pick(&self.seed, &file.seed),
            image_size: pick(&self.image_size, &file.image_size),
            flip: pick(&self.flip, &file.flip),
            grad_clip: pick(&self.grad_clip, &file.grad_clip),
            precision: pick(&self.precision, &file.precision),
            base_width: pick(&self.base_width, &file.base_width),
            dsd_levels: pick(&self.dsd_levels, &file.dsd_levels),
            blocks_per_level: pick(&self.blocks_per_level, &file.blocks_per_level),
            tied_streams: pick(&self.tied_streams, &file.tied_streams),
            backbone_narrow: pick(&self.backbone_narrow, &file.backbone_narrow),
            backbone_weights: pick(&self.backbone_weights, &file.backbone_weights),
            backbone_seed: pick(&self.backbone_seed, &file.backbone_seed),
            encoder: pick(&self.encoder, &file.encoder),
            interaction: pick(&self.interaction, &file.interaction),
            reconstruction: pick(&self.reconstruction, &file.reconstruction),
            alpha: pick(&self.alpha, &file.alpha),
            beta_perceptual: pick(&self.beta_perceptual, &file.beta_perceptual),
            beta_exclusion: pick(&self.beta_exclusion, &file.beta_exclusion),
            beta_reconstruction: pick(&self.beta_reconstruction, &file.beta_reconstruction),
            exclusion_scales: pick(&self.exclusion_scales, &file.exclusion_scales),
        }
    }

    /// Applies `--ablate key=value` switches (`reconstruction`, `interaction`, `encoder`).
    pub fn with_ablations(mut self, ablations: &[String]) -> Result<Self> {
        for a in ablations {
            let (key, value) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("ablation {a:?} is not key=value")))?;
            let slot = match key {
                "reconstruction" => &mut self.reconstruction,
                "interaction" => &mut self.interaction,
                "encoder" => &mut self.encoder,
                other => return Err(Error::Config(format!("unknown ablation key {other:?}"))),
            };
            *slot = Some(value.to_string());
        }
        Ok(self)
    }

    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if !self.manifests.is_empty() {
            cfg.manifests = self.manifests.clone();
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = &self.$field { $target = v.clone(); })*
            };
        }
        set! {
            checkpoint_dir => cfg.checkpoint_dir,
            epochs => cfg.epochs,
            checkpoint_every => cfg.checkpoint_every,
            lr => cfg.lr,
            batch_size => cfg.batch_size,
            seed => cfg.seed,
            flip => cfg.flip,
            base_width => cfg.model.base_width,
            dsd_levels => cfg.model.dsd_levels,
            blocks_per_level => cfg.model.blocks_per_level,
            tied_streams => cfg.model.tied_streams,
            alpha => cfg.loss.alpha,
            beta_perceptual => cfg.loss.beta_perceptual,
            beta_exclusion => cfg.loss.beta_exclusion,
            beta_reconstruction => cfg.loss.beta_reconstruction,
            exclusion_scales => cfg.loss.exclusion_scales,
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if self.grad_clip.is_some() {
            cfg.grad_clip = self.grad_clip;
        }
        if let Some(s) = self.image_size {
            cfg.image_size = (s != 0).then_some(s);
        }
        if let Some(p) = &self.precision {
            cfg.precision = match p.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(Error::Config(format!("unknown precision {other:?}"))),
            };
        }
        if let Some(n) = self.backbone_narrow {
            if n == 0 {
                return Err(Error::Config("backbone_narrow must be at least 1".into()));
            }
            cfg.model.backbone = BackboneConfig::vgg19_narrow(n);
        }
        if let Some(path) = &self.backbone_weights {
            cfg.backbone = BackboneSource::File { path: path.clone() };
        } else if let Some(seed) = self.backbone_seed {
            cfg.backbone = BackboneSource::Random { seed };
        }
        if let Some(e) = &self.encoder {
            cfg.model.encoder = e.parse::<EncoderKind>()?;
        }
        if let Some(i) = &self.interaction {
            cfg.model.interaction = i.parse::<InteractionMode>()?;
        }
        if let Some(r) = &self.reconstruction {
            cfg.reconstruction = r.parse::<ReconstructionMode>()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_wins() {
        let file: TrainOverrides = toml::from_str("lr = 0.5\nepochs = 3\nencoder = \"off\"").unwrap();
        let cli = TrainOverrides {
            lr: Some(0.25),
            ..Default::default()
        };
        let merged = cli.over(file);
        let mut cfg = TrainConfig::default();
        merged.apply(&mut cfg).unwrap();
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.model.encoder, EncoderKind::Off);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<TrainOverrides>("learning_rate = 1.0").is_err());
    }

    #[test]
    fn ablation_switches() {
        let o = TrainOverrides::default()
            .with_ablations(&["reconstruction=linear".into(), "interaction=ytmt".into()])
            .unwrap();
        let mut cfg = TrainConfig::default();
        o.apply(&mut cfg).unwrap();
        assert_eq!(cfg.reconstruction, ReconstructionMode::Linear);
        assert_eq!(cfg.model.interaction, InteractionMode::Ytmt);
        assert!(TrainOverrides::default().with_ablations(&["depth=3".into()]).is_err());
    }
}
