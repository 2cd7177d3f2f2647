//! Training data: screen-blend synthesis, real-pair ingestion and JSON-lines manifests.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// `g1 * t + g2 * r - g1 * g2 * t * r`, elementwise.
///
/// Equals `1 - (1 - g1 t)(1 - g2 r)`, so it stays in `[0, 1]` for inputs in `[0, 1]`.
pub fn screen_blend(t: &Image, r: &Image, g1: f64, g2: f64) -> Result<Image> {
    if t.dims() != r.dims() {
        return Err(Error::shape(format!(
            "blend layers differ in size: {:?} vs {:?}",
            t.dims(),
            r.dims()
        )));
    }
    for (name, g) in [("gamma1", g1), ("gamma2", g2)] {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::Domain(format!("{name} = {g} outside [0, 1]")));
        }
    }
    let in_range = |img: &Image| img.data().iter().all(|v| (0.0..=1.0).contains(v));
    if !in_range(t) || !in_range(r) {
        return Err(Error::Domain("blend inputs must lie in [0, 1]".into()));
    }
    let data = t
        .data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| g1 * a + g2 * b - g1 * g2 * a * b)
        .collect();
    Image::new(t.height(), t.width(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaRanges {
    pub gamma1: (f64, f64),
    pub gamma2: (f64, f64),
}

impl Default for GammaRanges {
    fn default() -> Self {
        Self {
            gamma1: (0.8, 1.0),
            gamma2: (0.4, 1.0),
        }
    }
}

impl GammaRanges {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.gamma1, self.gamma2] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("invalid gamma range {lo}:{hi}")));
            }
        }
        Ok(())
    }
}

/// Draws `(gamma1, gamma2)` uniformly from the default ranges.
pub fn sample_gammas(rng: &mut impl Rng) -> (f64, f64) {
    sample_gammas_in(rng, &GammaRanges::default())
}

pub fn sample_gammas_in(rng: &mut impl Rng, ranges: &GammaRanges) -> (f64, f64) {
    let draw = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    };
    let g1 = draw(rng, ranges.gamma1);
    let g2 = draw(rng, ranges.gamma2);
    (g1, g2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurConfig {
    pub enabled: bool,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma_min: 1.0,
            sigma_max: 5.0,
        }
    }
}

impl BlurConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::Config(format!(
                "blur sigma range {}:{} must be positive and ordered",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable Gaussian blur with reflect padding; radius `ceil(3 sigma)`.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (h, w) = img.dims();
    let horizontal = Image::from_fn(h, w, |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * img.get(y, reflect_index(x as isize + i as isize - radius, w), c))
            .sum()
    });
    Image::from_fn(h, w, |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * horizontal.get(reflect_index(y as isize + i as isize - radius, h), x, c))
            .sum()
    })
}

/// Smooths a reflection layer with a Gaussian of random width; identity when disabled.
pub fn prepare_reflection(img: &Image, rng: &mut impl Rng, blur: &BlurConfig) -> Result<Image> {
    blur.validate()?;
    if !blur.enabled {
        return Ok(img.clone());
    }
    let sigma = if blur.sigma_min == blur.sigma_max {
        blur.sigma_min
    } else {
        rng.random_range(blur.sigma_min..=blur.sigma_max)
    };
    Ok(gaussian_blur(img, sigma))
}

/// A synthesized training triple.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub mixed: Image,
    pub gt_t: Image,
    pub gt_r: Image,
    pub gamma1: f64,
    pub gamma2: f64,
    pub t_source: String,
    pub r_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub count: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub gammas: GammaRanges,
    pub blur: BlurConfig,
    pub flip: bool,
    pub split: String,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            count: 1,
            crop_size: 224,
            seed: 0,
            gammas: GammaRanges::default(),
            blur: BlurConfig::default(),
            flip: true,
            split: "train".into(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthesis count must be at least 1".into()));
        }
        if self.crop_size < 2 {
            return Err(Error::Config(format!("crop size {} too small", self.crop_size)));
        }
        self.gammas.validate()?;
        self.blur.validate()
    }
}

/// Random `size` x `size` crop, upscaling first when the image is too small.
pub fn random_crop(img: &Image, size: usize, rng: &mut impl Rng) -> Result<Image> {
    let (h, w) = img.dims();
    let img = if h < size || w < size {
        let scale = size as f64 / h.min(w) as f64;
        let nh = ((h as f64 * scale).ceil() as usize).max(size);
        let nw = ((w as f64 * scale).ceil() as usize).max(size);
        img.resize(nh, nw)
    } else {
        img.clone()
    };
    let (h, w) = img.dims();
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    img.crop(top, left, size, size)
}

/// Crops both sources, smooths the reflection and blends. `t` and `r` are quantized to
/// 8-bit levels before blending so that stored files reproduce the blend.
pub fn synthesize_pair(
    t_src: &Image,
    r_src: &Image,
    rng: &mut impl Rng,
    cfg: &SynthesisConfig,
) -> Result<(Image, Image, Image, f64, f64)> {
    let mut t = random_crop(t_src, cfg.crop_size, rng)?;
    let mut r = random_crop(r_src, cfg.crop_size, rng)?;
    if cfg.flip && rng.random_bool(0.5) {
        t = t.flip_horizontal();
    }
    if cfg.flip && rng.random_bool(0.5) {
        r = r.flip_horizontal();
    }
    let t = t.quantized();
    let r = prepare_reflection(&r, rng, &cfg.blur)?.quantized();
    let (g1, g2) = sample_gammas_in(rng, &cfg.gammas);
    let mixed = screen_blend(&t, &r, g1, g2)?;
    Ok((mixed, t, r, g1, g2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Synthetic,
    Real,
}

/// One manifest line. Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub kind: RecordKind,
    pub mixed_path: PathBuf,
    pub t_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<f64>,
    pub split: String,
}

/// A record with paths resolved against its manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRecord {
    pub id: String,
    pub kind: RecordKind,
    pub mixed: PathBuf,
    pub t: PathBuf,
    pub r: Option<PathBuf>,
}

/// Images of one record; `gt_r` is absent for real pairs without a reflection layer.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub mixed: Image,
    pub gt_t: Image,
    pub gt_r: Option<Image>,
}

impl ResolvedRecord {
    pub fn load(&self) -> Result<Sample> {
        let mixed = Image::load(&self.mixed)?;
        let gt_t = Image::load(&self.t)?;
        let gt_r = self.r.as_ref().map(Image::load).transpose()?;
        if gt_t.dims() != mixed.dims() || gt_r.as_ref().is_some_and(|r| r.dims() != mixed.dims()) {
            return Err(Error::Ingestion {
                offenders: vec![format!("{}: layer sizes differ", self.id)],
            });
        }
        Ok(Sample {
            id: self.id.clone(),
            mixed,
            gt_t,
            gt_r,
        })
    }
}

impl Sample {
    /// Same random crop (and optional flip) applied to every layer.
    pub fn augment(&self, crop: usize, flip: bool, rng: &mut impl Rng) -> Result<Sample> {
        let (h, w) = self.mixed.dims();
        let resized;
        let src = if h < crop || w < crop {
            let scale = crop as f64 / h.min(w) as f64;
            let nh = ((h as f64 * scale).ceil() as usize).max(crop);
            let nw = ((w as f64 * scale).ceil() as usize).max(crop);
            resized = Sample {
                id: self.id.clone(),
                mixed: self.mixed.resize(nh, nw),
                gt_t: self.gt_t.resize(nh, nw),
                gt_r: self.gt_r.as_ref().map(|r| r.resize(nh, nw)),
            };
            &resized
        } else {
            self
        };
        let (h, w) = src.mixed.dims();
        let top = rng.random_range(0..=h - crop);
        let left = rng.random_range(0..=w - crop);
        let flipped = flip && rng.random_bool(0.5);
        let apply = |img: &Image| -> Result<Image> {
            let c = img.crop(top, left, crop, crop)?;
            Ok(if flipped { c.flip_horizontal() } else { c })
        };
        Ok(Sample {
            id: src.id.clone(),
            mixed: apply(&src.mixed)?,
            gt_t: apply(&src.gt_t)?,
            gt_r: src.gt_r.as_ref().map(apply).transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn resolved(&self) -> Vec<ResolvedRecord> {
        self.records
            .iter()
            .map(|r| ResolvedRecord {
                id: r.id.clone(),
                kind: r.kind,
                mixed: self.resolve_path(&r.mixed_path),
                t: self.resolve_path(&r.t_path),
                r: r.r_path.as_ref().map(|p| self.resolve_path(p)),
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest and checks that ids are unique and every referenced file exists.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut manifest = DatasetManifest::new(base_dir);
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Ingestion {
                offenders: vec![format!("{}:{}: {e}", path.display(), n + 1)],
            })?;
            manifest.records.push(record);
        }
        manifest.check()?;
        Ok(manifest)
    }

    pub fn check(&self) -> Result<()> {
        let mut offenders = Vec::new();
        let mut seen = HashSet::new();
        for (rec, res) in self.records.iter().zip(self.resolved()) {
            if !seen.insert(rec.id.as_str()) {
                offenders.push(format!("duplicate id {}", rec.id));
            }
            for p in [Some(&res.mixed), Some(&res.t), res.r.as_ref()].into_iter().flatten() {
                if !p.is_file() {
                    offenders.push(format!("{}: missing {}", rec.id, p.display()));
                }
            }
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::Ingestion { offenders })
        }
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Resource(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Synthesizes `cfg.count` pairs from the images in `source_dir` into `out_dir` and
/// writes `out_dir/manifest.jsonl`.
///
/// Sources are paired without replacement until exhausted, then reshuffled; the two
/// layers of a pair always come from different files. Each record draws its crops,
/// blur and gammas from its own seeded stream.
pub fn build_synthetic_dataset(source_dir: &Path, out_dir: &Path, cfg: &SynthesisConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    if !source_dir.is_dir() {
        return Err(Error::Resource(format!("source directory {} not found", source_dir.display())));
    }
    let sources = list_images(source_dir)?;
    if sources.len() < 2 {
        return Err(Error::Resource(format!(
            "{} holds {} images; synthesis needs at least 2",
            source_dir.display(),
            sources.len()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queue: Vec<usize> = Vec::new();
    let mut next_index = |rng: &mut ChaCha8Rng, avoid: Option<usize>| -> usize {
        if queue.is_empty() {
            queue = (0..sources.len()).collect();
            queue.shuffle(rng);
        }
        let pos = match avoid {
            Some(a) => queue.iter().rposition(|&i| i != a).unwrap_or_else(|| {
                // only `a` left in this round: start a fresh one
                queue = (0..sources.len()).collect();
                queue.shuffle(rng);
                queue.iter().rposition(|&i| i != a).expect("at least two sources")
            }),
            None => queue.len() - 1,
        };
        queue.remove(pos)
    };

    let mut cache: BTreeMap<usize, Image> = BTreeMap::new();
    let mut manifest = DatasetManifest::new(out_dir);
    for k in 0..cfg.count {
        let ti = next_index(&mut pair_rng, None);
        let ri = next_index(&mut pair_rng, Some(ti));
        for i in [ti, ri] {
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(i) {
                e.insert(Image::load(&sources[i])?);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k as u64 + 1)));
        let (mixed, t, r, g1, g2) = synthesize_pair(&cache[&ti], &cache[&ri], &mut rng, cfg)?;
        let id = format!("syn_{k:05}");
        let names = [format!("{id}_I.png"), format!("{id}_T.png"), format!("{id}_R.png")];
        for (img, name) in [&mixed, &t, &r].into_iter().zip(&names) {
            img.save_png(out_dir.join(name))?;
        }
        log::debug!("{id}: T={} R={} g1={g1:.4} g2={g2:.4}", file_name(&sources[ti]), file_name(&sources[ri]));
        manifest.records.push(ManifestRecord {
            id,
            kind: RecordKind::Synthetic,
            mixed_path: names[0].clone().into(),
            t_path: names[1].clone().into(),
            r_path: Some(names[2].clone().into()),
            gamma1: Some(g1),
            gamma2: Some(g2),
            split: cfg.split.clone(),
        });
        if cache.len() > 64 {
            cache.clear();
        }
    }
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Same pairing and synthesis as [`build_synthetic_dataset`], kept in memory with source
/// provenance.
pub fn synthesize_in_memory(sources: &[(String, Image)], cfg: &SynthesisConfig) -> Result<Vec<SyntheticPair>> {
    cfg.validate()?;
    if sources.len() < 2 {
        return Err(Error::Resource("synthesis needs at least 2 source images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|_| {
            let ti = rng.random_range(0..sources.len());
            let mut ri = rng.random_range(0..sources.len() - 1);
            if ri >= ti {
                ri += 1;
            }
            let (mixed, gt_t, gt_r, gamma1, gamma2) = synthesize_pair(&sources[ti].1, &sources[ri].1, &mut rng, cfg)?;
            Ok(SyntheticPair {
                mixed,
                gt_t,
                gt_r,
                gamma1,
                gamma2,
                t_source: sources[ti].0.clone(),
                r_source: sources[ri].0.clone(),
            })
        })
        .collect()
}

/// Splits `name_I.png` into `("name", 'I')`; `I.png` gives an empty stem.
fn parse_layer_name(path: &Path) -> Option<(String, char)> {
    let stem = path.file_stem()?.to_str()?;
    let layer = stem.chars().last()?;
    if !matches!(layer, 'I' | 'T' | 'R') {
        return None;
    }
    let rest = &stem[..stem.len() - 1];
    let base = match rest.strip_suffix('_') {
        Some(b) => b,
        None if rest.is_empty() => rest,
        None => return None,
    };
    Some((base.to_string(), layer))
}

/// Ingests a flat directory of real pairs named `<stem>_I.<ext>` (mixed),
/// `<stem>_T.<ext>` (transmission) and optionally `<stem>_R.<ext>` (reflection).
/// Files outside this scheme are ignored.
pub fn load_real_pairs(dir: &Path) -> Result<DatasetManifest> {
    if !dir.is_dir() {
        return Err(Error::Resource(format!("directory {} not found", dir.display())));
    }
    let mut groups: BTreeMap<String, BTreeMap<char, PathBuf>> = BTreeMap::new();
    let mut offenders = Vec::new();
    for path in list_images(dir)? {
        if let Some((stem, layer)) = parse_layer_name(&path) {
            if let Some(prev) = groups.entry(stem).or_default().insert(layer, path.clone()) {
                offenders.push(format!("{} and {} name the same layer", file_name(&prev), file_name(&path)));
            }
        }
    }
    let mut manifest = DatasetManifest::new(dir);
    for (stem, layers) in &groups {
        let (Some(i), Some(t)) = (layers.get(&'I'), layers.get(&'T')) else {
            let names: Vec<String> = layers.values().map(|p| file_name(p)).collect();
            offenders.push(format!("unpaired: {}", names.join(", ")));
            continue;
        };
        let dims = |p: &Path| {
            image::image_dimensions(p).map_err(|source| Error::Image {
                path: p.to_path_buf(),
                source,
            })
        };
        let di = dims(i)?;
        let mut mismatch = dims(t)? != di;
        if let Some(r) = layers.get(&'R') {
            mismatch |= dims(r)? != di;
        }
        if mismatch {
            offenders.push(format!("{}: layer sizes differ", file_name(i)));
            continue;
        }
        let id = if stem.is_empty() { "real".to_string() } else { format!("real_{stem}") };
        manifest.records.push(ManifestRecord {
            id,
            kind: RecordKind::Real,
            mixed_path: file_name(i).into(),
            t_path: file_name(t).into(),
            r_path: layers.get(&'R').map(|p| file_name(p).into()),
            gamma1: None,
            gamma2: None,
            split: "train".into(),
        });
    }
    if offenders.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::Ingestion { offenders })
    }
}
