//! PSNR, SSIM and count-weighted benchmark reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{DatasetManifest, ResolvedRecord};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::model::DsrNet;

/// Reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 0.01) as f64;
const SSIM_C2: f64 = (0.03 * 0.03) as f64;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("metric inputs differ in size: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsimOptions {
    /// Score BT.601 luma instead of averaging the three channels.
    pub grayscale: bool,
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Gaussian-weighted local average over every fully contained window.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum::<f64>()
        / n as f64
}

fn channel_plane(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(CHANNELS).copied().collect()
}

fn luma_plane(img: &Image) -> Vec<f64> {
    img.data().chunks(CHANNELS).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
}

/// Mean local SSIM (11 x 11 Gaussian window, sigma 1.5, valid windows only).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, SsimOptions::default())
}

pub fn ssim_with(a: &Image, b: &Image, opts: SsimOptions) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    if opts.grayscale {
        return Ok(ssim_plane(&luma_plane(a), &luma_plane(b), h, w));
    }
    let total: f64 = (0..CHANNELS).map(|c| ssim_plane(&channel_plane(a, c), &channel_plane(b, c), h, w)).sum();
    Ok(total / CHANNELS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub dataset: String,
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub image_count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub image_count: usize,
    pub weighted_psnr: f64,
    pub weighted_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetScore>,
    pub aggregate: Aggregate,
    pub rows: Vec<ImageScore>,
}

/// Image-count-weighted means of per-dataset means.
pub fn aggregate(datasets: &[DatasetScore]) -> Result<Aggregate> {
    let count: usize = datasets.iter().map(|d| d.image_count).sum();
    if count == 0 {
        return Err(Error::Domain("aggregation needs at least one scored image".into()));
    }
    let weighted = |f: fn(&DatasetScore) -> f64| {
        datasets.iter().map(|d| d.image_count as f64 * f(d)).sum::<f64>() / count as f64
    };
    Ok(Aggregate {
        image_count: count,
        weighted_psnr: weighted(|d| d.mean_psnr),
        weighted_ssim: weighted(|d| d.mean_ssim),
    })
}

impl EvalReport {
    /// Groups rows by dataset, in order of first appearance.
    pub fn from_rows(rows: Vec<ImageScore>) -> Result<Self> {
        let mut datasets: Vec<DatasetScore> = Vec::new();
        for row in &rows {
            let entry = match datasets.iter_mut().find(|d| d.name == row.dataset) {
                Some(d) => d,
                None => {
                    datasets.push(DatasetScore {
                        name: row.dataset.clone(),
                        image_count: 0,
                        mean_psnr: 0.0,
                        mean_ssim: 0.0,
                    });
                    datasets.last_mut().expect("just pushed")
                }
            };
            entry.image_count += 1;
            entry.mean_psnr += row.psnr;
            entry.mean_ssim += row.ssim;
        }
        for d in &mut datasets {
            d.mean_psnr /= d.image_count as f64;
            d.mean_ssim /= d.image_count as f64;
        }
        let aggregate = aggregate(&datasets)?;
        Ok(Self {
            datasets,
            aggregate,
            rows,
        })
    }

    /// Builds a report from published per-dataset means alone.
    pub fn from_summaries(datasets: Vec<DatasetScore>) -> Result<Self> {
        let aggregate = aggregate(&datasets)?;
        Ok(Self {
            datasets,
            aggregate,
            rows: Vec::new(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,id,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", r.dataset, r.id, r.psnr, r.ssim);
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
        fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))
    }
}

/// Produces a transmission estimate for one benchmark record.
pub trait Predictor {
    fn predict(&mut self, record: &ResolvedRecord, mixed: &Image) -> Result<Image>;
}

/// Runs the network with the residue branch disabled.
pub struct ModelPredictor<'a> {
    pub model: &'a DsrNet,
    pub backbone: &'a Backbone,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, _record: &ResolvedRecord, mixed: &Image) -> Result<Image> {
        Ok(self.model.infer(mixed, self.backbone, false)?.transmission)
    }
}

/// Reads `<stem>_T.png` from a directory, where `<stem>` is the mixed image's file stem.
pub struct DirectoryPredictor {
    pub dir: PathBuf,
}

impl Predictor for DirectoryPredictor {
    fn predict(&mut self, record: &ResolvedRecord, _mixed: &Image) -> Result<Image> {
        let stem = record.mixed.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let path = self.dir.join(format!("{stem}_T.png"));
        if !path.is_file() {
            return Err(Error::Resource(format!("no prediction {} for {}", path.display(), record.id)));
        }
        Image::load(path)
    }
}

/// Scores every record of every named manifest against its ground-truth transmission.
pub fn evaluate(
    manifests: &[(String, DatasetManifest)],
    predictor: &mut dyn Predictor,
    opts: SsimOptions,
) -> Result<EvalReport> {
    if manifests.is_empty() || manifests.iter().all(|(_, m)| m.is_empty()) {
        return Err(Error::Domain("evaluation needs a non-empty manifest".into()));
    }
    let mut rows = Vec::new();
    for (name, manifest) in manifests {
        for record in manifest.resolved() {
            let sample = record.load()?;
            let pred = predictor.predict(&record, &sample.mixed)?;
            let score = ImageScore {
                dataset: name.clone(),
                id: record.id.clone(),
                psnr: psnr(&pred, &sample.gt_t)?,
                ssim: ssim_with(&pred, &sample.gt_t, opts)?,
            };
            log::info!("{name}/{}: {:.3} dB, ssim {:.4}", score.id, score.psnr, score.ssim);
            rows.push(score);
        }
    }
    EvalReport::from_rows(rows)
}
