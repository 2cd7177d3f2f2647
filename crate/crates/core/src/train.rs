//! Training loop: Adam steps on the full objective, JSON-lines logging, per-epoch
//! checkpoints and exact resumption.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSource};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{DatasetManifest, ResolvedRecord, Sample};
use crate::error::{Error, Result};
use crate::image::{stack_images, Image};
use crate::losses::{total_loss, LossBreakdown, LossWeights, ReconstructionMode};
use crate::model::{DsrNet, ModelConfig, SIZE_MULTIPLE};
use crate::optim::{clip_grad_norm, Adam, AdamConfig, Moments};

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub reconstruction: ReconstructionMode,
    pub backbone: BackboneSource,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stops early after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub manifests: Vec<PathBuf>,
    pub checkpoint_dir: PathBuf,
    /// Write a checkpoint every this many epochs (the final one is always written).
    pub checkpoint_every: u64,
    /// Square training crop; `None` trains on whole images trimmed to a multiple of 16.
    pub image_size: Option<usize>,
    pub flip: bool,
    pub grad_clip: Option<f64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            reconstruction: ReconstructionMode::default(),
            backbone: BackboneSource::Random { seed: 0 },
            lr: 1e-4,
            batch_size: 1,
            epochs: 20,
            max_steps: None,
            seed: 0,
            manifests: Vec::new(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every: 1,
            image_size: Some(224),
            flip: true,
            grad_clip: None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.adam().validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(s) = self.image_size {
            if s == 0 || s % SIZE_MULTIPLE != 0 {
                return Err(Error::Config(format!("image size {s} must be a positive multiple of {SIZE_MULTIPLE}")));
            }
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Recovers the configuration stored inside a checkpoint.
    pub fn from_snapshot(value: &serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(value.clone())?)
    }
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub pixel: f64,
    pub perceptual: f64,
    pub exclusion: f64,
    pub reconstruction: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// Stacked training tensors. `gt_r` is dropped when any sample lacks a reflection layer.
#[derive(Clone, Debug)]
pub struct Batch {
    pub mixed: Tensor,
    pub gt_t: Tensor,
    pub gt_r: Option<Tensor>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample], dtype: DType, device: &Device) -> Result<Self> {
        let mixed: Vec<_> = samples.iter().map(|s| &s.mixed).collect();
        let gt_t: Vec<_> = samples.iter().map(|s| &s.gt_t).collect();
        let gt_r: Option<Vec<_>> = samples.iter().map(|s| s.gt_r.as_ref()).collect();
        Ok(Self {
            mixed: stack_images(&mixed, dtype, device)?,
            gt_t: stack_images(&gt_t, dtype, device)?,
            gt_r: gt_r.map(|r| stack_images(&r, dtype, device)).transpose()?,
        })
    }
}

/// Reads every manifest and concatenates their records.
pub fn load_records(paths: &[PathBuf]) -> Result<Vec<ResolvedRecord>> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(DatasetManifest::read(p)?.resolved());
    }
    if records.is_empty() {
        return Err(Error::Domain("training manifests contain no records".into()));
    }
    Ok(records)
}

/// Rebuilds a network from checkpointed parameters.
pub fn load_model(ckpt: &Checkpoint) -> Result<DsrNet> {
    let dtype = ckpt
        .tensors
        .iter()
        .find(|(k, _)| k.starts_with("param/"))
        .map(|(_, t)| t.dtype())
        .ok_or_else(|| Error::Domain("checkpoint holds no parameters".into()))?;
    let model = DsrNet::new(&ckpt.model, 0, dtype, &Device::Cpu)?;
    restore_params(&model, &ckpt.tensors)?;
    Ok(model)
}

fn restore_params(model: &DsrNet, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, var) in model.params().vars() {
        let t = tensors
            .get(&format!("param/{name}"))
            .ok_or_else(|| Error::Domain(format!("checkpoint lacks parameter {name}")))?;
        if t.dims() != var.dims() || t.dtype() != var.dtype() {
            return Err(Error::Domain(format!("checkpoint parameter {name} has a different shape or dtype")));
        }
        var.set(t)?;
    }
    Ok(())
}

/// Frozen feature network described by a checkpoint's stored run configuration.
pub fn load_backbone(ckpt: &Checkpoint, dtype: DType) -> Result<Backbone> {
    let cfg = TrainConfig::from_snapshot(&ckpt.train)?;
    Backbone::load(&cfg.backbone, &ckpt.model.backbone, dtype, &Device::Cpu)
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    parts.iter().fold(0x853C_49E6_748F_EA9Bu64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

pub struct Trainer {
    config: TrainConfig,
    model: DsrNet,
    backbone: Backbone,
    adam: Adam,
    records: Vec<ResolvedRecord>,
    step: u64,
    cache: BTreeMap<usize, Sample>,
}

impl Trainer {
    /// Fresh run: parameters are drawn from `config.seed`.
    pub fn new(config: TrainConfig, records: Vec<ResolvedRecord>) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::Domain("training needs at least one record".into()));
        }
        let dtype = config.precision.dtype();
        let model = DsrNet::new(&config.model, config.seed, dtype, &Device::Cpu)?;
        let backbone = Backbone::load(&config.backbone, &config.model.backbone, dtype, &Device::Cpu)?;
        let adam = Adam::new(config.adam())?;
        Ok(Self {
            config,
            model,
            backbone,
            adam,
            records,
            step: 0,
            cache: BTreeMap::new(),
        })
    }

    /// Continues a run from a checkpoint. The checkpoint's model configuration wins over
    /// `config.model`.
    pub fn resume(mut config: TrainConfig, records: Vec<ResolvedRecord>, ckpt: &Checkpoint) -> Result<Self> {
        if config.model != ckpt.model {
            log::warn!("resuming with the checkpoint's model configuration");
            config.model = ckpt.model.clone();
        }
        let mut trainer = Self::new(config, records)?;
        restore_params(&trainer.model, &ckpt.tensors)?;
        let mut moments = BTreeMap::new();
        for (name, _) in trainer.model.params().vars() {
            if let (Some(m), Some(v)) = (ckpt.tensors.get(&format!("adam.m/{name}")), ckpt.tensors.get(&format!("adam.v/{name}"))) {
                moments.insert(name.to_string(), Moments { m: m.clone(), v: v.clone() });
            }
        }
        trainer.adam = Adam::with_state(trainer.config.adam(), ckpt.step, moments)?;
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &DsrNet {
        &self.model
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.records.len().div_ceil(self.config.batch_size) as u64
    }

    /// Epochs fully completed.
    pub fn epochs_done(&self) -> u64 {
        self.step / self.steps_per_epoch()
    }

    /// Loss breakdown of the current parameters on a batch, without updating.
    pub fn evaluate_batch(&self, batch: &Batch) -> Result<LossBreakdown> {
        Ok(self.loss_terms(batch)?.breakdown)
    }

    fn loss_terms(&self, batch: &Batch) -> Result<crate::losses::LossTerms> {
        let with_residue = self.config.reconstruction == ReconstructionMode::Residual;
        let out = self.model.forward(&batch.mixed, &self.backbone, with_residue)?;
        total_loss(
            &batch.mixed,
            &out,
            &batch.gt_t,
            batch.gt_r.as_ref(),
            &self.config.loss,
            self.config.reconstruction,
            &self.backbone,
        )
    }

    /// One Adam update on the total loss; returns the breakdown before the update.
    pub fn training_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let terms = self.loss_terms(batch)?;
        if !terms.breakdown.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                breakdown: terms.breakdown,
            });
        }
        let mut grads = terms.total.backward()?;
        if let Some(max_norm) = self.config.grad_clip {
            clip_grad_norm(self.model.params(), &mut grads, max_norm)?;
        }
        self.adam.step(self.model.params(), &grads)?;
        self.step += 1;
        Ok(terms.breakdown)
    }

    fn sample(&mut self, index: usize) -> Result<Sample> {
        if let Some(s) = self.cache.get(&index) {
            return Ok(s.clone());
        }
        let s = self.records[index].load()?;
        if self.records.len() <= 256 {
            self.cache.insert(index, s.clone());
        }
        Ok(s)
    }

    fn prepare(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<Sample> {
        match self.config.image_size {
            Some(size) => sample.augment(size, self.config.flip, rng),
            None => {
                let (h, w) = sample.mixed.dims();
                let (th, tw) = (h / SIZE_MULTIPLE * SIZE_MULTIPLE, w / SIZE_MULTIPLE * SIZE_MULTIPLE);
                if th == 0 || tw == 0 {
                    return Err(Error::shape(format!("{}: {h}x{w} is smaller than {SIZE_MULTIPLE}", sample.id)));
                }
                let flipped = self.config.flip && rng.random_bool(0.5);
                let apply = |img: &Image| -> Result<Image> {
                    let c = img.crop(0, 0, th, tw)?;
                    Ok(if flipped { c.flip_horizontal() } else { c })
                };
                Ok(Sample {
                    id: sample.id.clone(),
                    mixed: apply(&sample.mixed)?,
                    gt_t: apply(&sample.gt_t)?,
                    gt_r: sample.gt_r.as_ref().map(apply).transpose()?,
                })
            }
        }
    }

    /// Record order for an epoch: a fresh uniform shuffle seeded by `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, epoch])));
        order
    }

    /// The batch used at global step `step` (0-based), derived only from the seed.
    pub fn batch_at(&mut self, step: u64) -> Result<Batch> {
        let spe = self.steps_per_epoch();
        let (epoch, offset) = (step / spe, (step % spe) as usize);
        let order = self.epoch_order(epoch);
        let bs = self.config.batch_size;
        let indices = &order[offset * bs..((offset + 1) * bs).min(order.len())];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, epoch, step, 1]));
        let mut samples = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.sample(i)?;
            samples.push(self.prepare(&s, &mut rng)?);
        }
        Batch::from_samples(&samples, self.model.dtype(), &Device::Cpu)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        for (name, var) in self.model.params().vars() {
            tensors.insert(format!("param/{name}"), var.as_tensor().copy()?);
        }
        for (name, m) in self.adam.moments() {
            tensors.insert(format!("adam.m/{name}"), m.m.clone());
            tensors.insert(format!("adam.v/{name}"), m.v.clone());
        }
        Ok(Checkpoint {
            model: self.model.config().clone(),
            epoch: self.epochs_done(),
            step: self.step,
            train: serde_json::to_value(&self.config)?,
            tensors,
        })
    }

    /// Runs until `config.epochs` epochs (or `config.max_steps` steps) are done, calling
    /// `on_step` after each update and writing `epoch_XXX.ckpt` every `checkpoint_every` epochs.
    /// Returns the path of the last checkpoint written.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<PathBuf> {
        let dir = self.config.checkpoint_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let spe = self.steps_per_epoch();
        let end = match self.config.max_steps {
            Some(m) => m.min(self.config.epochs * spe),
            None => self.config.epochs * spe,
        };
        let mut last = None;
        while self.step < end {
            let started = Instant::now();
            let batch = self.batch_at(self.step)?;
            let b = self.training_step(&batch)?;
            let entry = StepLog {
                step: self.step,
                epoch: (self.step - 1) / spe + 1,
                pixel: b.pixel,
                perceptual: b.perceptual,
                exclusion: b.exclusion,
                reconstruction: b.reconstruction,
                total: b.total,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            on_step(&entry)?;
            let boundary = self.step % spe == 0;
            if (boundary && (self.step / spe) % self.config.checkpoint_every == 0) || self.step == end {
                let path = if boundary {
                    dir.join(format!("epoch_{:03}.ckpt", self.step / spe))
                } else {
                    dir.join(format!("step_{:06}.ckpt", self.step))
                };
                save_checkpoint(&path, &self.checkpoint()?)?;
                log::info!("wrote {}", path.display());
                last = Some(path);
            }
        }
        last.ok_or_else(|| Error::Domain("run already complete; nothing to train".into()))
    }
}

/// Appends step records to a JSON-lines file.
pub struct JsonlLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, entry: &StepLog) -> Result<()> {
        serde_json::to_writer(&mut self.out, entry)?;
        writeln!(self.out).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
