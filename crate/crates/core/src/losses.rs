//! Training objectives: pixel, perceptual, exclusion and residue-rectified reconstruction
//! losses, and their weighted sum.
//!
//! Every norm is reduced by a mean over its elements, so magnitudes do not depend on
//! resolution. All inputs are `(N, 3, H, W)` tensors; the functions are differentiable.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractor;
use crate::error::{Error, Result};
use crate::model::Decomposition;

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub perceptual: f64,
    pub exclusion: f64,
    pub reconstruction: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.pixel, self.perceptual, self.exclusion, self.reconstruction, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// How the exclusion loss scales gradient magnitudes before `tanh`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaPolicy {
    /// Both factors 1.
    Unit,
    /// First factor 1; second `mean|grad first| / (mean|grad second| + 1e-6)`.
    #[default]
    BalanceSecond,
    /// Second factor 1; first `mean|grad second| / (mean|grad first| + 1e-6)`.
    BalanceFirst,
}

impl EtaPolicy {
    /// The policy that yields the same loss when the two images are exchanged.
    pub fn swapped(self) -> Self {
        match self {
            EtaPolicy::Unit => EtaPolicy::Unit,
            EtaPolicy::BalanceSecond => EtaPolicy::BalanceFirst,
            EtaPolicy::BalanceFirst => EtaPolicy::BalanceSecond,
        }
    }
}

/// Which reconstruction criterion enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructionMode {
    /// No reconstruction term.
    Off,
    /// `|I - T - R|`, i.e. the residue forced to zero.
    Linear,
    /// `|I - T - R - residue|`.
    #[default]
    Residual,
}

impl std::str::FromStr for ReconstructionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "linear" => Ok(Self::Linear),
            "residual" => Ok(Self::Residual),
            other => Err(Error::Config(format!("unknown reconstruction mode {other:?}"))),
        }
    }
}

/// Perceptual weights for the five backbone taps.
pub const DEFAULT_PERCEPTUAL_WEIGHTS: [f64; 5] = [1.0 / 2.6, 1.0 / 4.8, 1.0 / 3.7, 1.0 / 5.6, 10.0 / 1.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the gradient-domain term of the pixel loss.
    pub alpha: f64,
    pub beta_perceptual: f64,
    pub beta_exclusion: f64,
    pub beta_reconstruction: f64,
    pub perceptual_layers: Vec<f64>,
    pub exclusion_scales: usize,
    pub eta: EtaPolicy,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta_perceptual: 0.01,
            beta_exclusion: 1.0,
            beta_reconstruction: 0.2,
            perceptual_layers: DEFAULT_PERCEPTUAL_WEIGHTS.to_vec(),
            exclusion_scales: 3,
            eta: EtaPolicy::BalanceSecond,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [self.alpha, self.beta_perceptual, self.beta_exclusion, self.beta_reconstruction];
        if scalars.iter().chain(&self.perceptual_layers).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if self.exclusion_scales == 0 {
            return Err(Error::Config("exclusion loss needs at least one scale".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn mean_abs(t: &Tensor) -> Result<Tensor> {
    Ok(t.abs()?.mean_all()?)
}

/// Forward differences along width (`dx`, one column shorter) and height (`dy`, one row
/// shorter).
pub fn image_gradients(img: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = img.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("gradients need at least 2x2 pixels, got {h}x{w}")));
    }
    let dx = (img.narrow(3, 1, w - 1)? - img.narrow(3, 0, w - 1)?)?;
    let dy = (img.narrow(2, 1, h - 1)? - img.narrow(2, 0, h - 1)?)?;
    Ok((dx, dy))
}

/// Mean absolute gradient difference, the two directions averaged.
fn gradient_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (pdx, pdy) = image_gradients(pred)?;
    let (gdx, gdy) = image_gradients(gt)?;
    let sx = mean_abs(&(pdx - gdx)?)?;
    let sy = mean_abs(&(pdy - gdy)?)?;
    Ok(((sx + sy)? * 0.5)?)
}

/// Squared error on both layers plus `alpha` times the gradient-domain L1 error.
///
/// When `gt_r` is `None` (real pairs without a reflection ground truth) the reflection
/// terms are dropped.
pub fn pixel_loss(pred_t: &Tensor, pred_r: &Tensor, gt_t: &Tensor, gt_r: Option<&Tensor>, alpha: f64) -> Result<Tensor> {
    same_shape(pred_t, gt_t, "pixel loss transmission")?;
    same_shape(pred_t, pred_r, "pixel loss predictions")?;
    let mut loss = ((pred_t - gt_t)?.sqr()?.mean_all()? + (gradient_l1(pred_t, gt_t)? * alpha)?)?;
    if let Some(gt_r) = gt_r {
        same_shape(pred_r, gt_r, "pixel loss reflection")?;
        loss = (loss + (pred_r - gt_r)?.sqr()?.mean_all()?)?;
        loss = (loss + (gradient_l1(pred_r, gt_r)? * alpha)?)?;
    }
    Ok(loss)
}

/// Weighted sum over extractor taps of the mean absolute feature difference.
pub fn perceptual_loss(pred_t: &Tensor, gt_t: &Tensor, extractor: &dyn FeatureExtractor, omega: &[f64]) -> Result<Tensor> {
    same_shape(pred_t, gt_t, "perceptual loss")?;
    let zero = pred_t.zeros_like()?.sum_all()?;
    if omega.iter().all(|&w| w == 0.0) {
        return Ok(zero);
    }
    let needed = omega.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
    let pred = extractor.leading_taps(pred_t, needed)?;
    let gt = extractor.leading_taps(&gt_t.detach(), needed)?;
    if pred.len() < needed {
        return Err(Error::Config(format!(
            "{} perceptual weights for {} feature taps",
            needed,
            pred.len()
        )));
    }
    let mut loss = zero;
    for ((p, g), &w) in pred.iter().zip(&gt).zip(omega) {
        if w != 0.0 {
            loss = (loss + (mean_abs(&(p - g)?)? * w)?)?;
        }
    }
    Ok(loss)
}

fn exclusion_direction(gt: &Tensor, gr: &Tensor, eta: EtaPolicy) -> Result<Tensor> {
    let at = gt.abs()?;
    let ar = gr.abs()?;
    let (st, sr) = match eta {
        EtaPolicy::Unit => (at, ar),
        EtaPolicy::BalanceSecond => {
            let ratio = (at.mean_all()? / (ar.mean_all()? + 1e-6)?)?;
            let sr = ar.broadcast_mul(&ratio)?;
            (at, sr)
        }
        EtaPolicy::BalanceFirst => {
            let ratio = (ar.mean_all()? / (at.mean_all()? + 1e-6)?)?;
            let st = at.broadcast_mul(&ratio)?;
            (st, ar)
        }
    };
    let psi = (st.tanh()? * sr.tanh()?)?;
    Ok(psi.sqr()?.mean_all()?)
}

/// Multi-scale penalty on co-located gradients of the two layers.
///
/// At each of `scales` levels (2x2 average pooling between levels) the product
/// `tanh(eta1 |grad T|) * tanh(eta2 |grad R|)` is squared and averaged, per direction;
/// the directions are averaged and the levels are averaged.
pub fn exclusion_loss(pred_t: &Tensor, pred_r: &Tensor, scales: usize, eta: EtaPolicy) -> Result<Tensor> {
    same_shape(pred_t, pred_r, "exclusion loss")?;
    if scales == 0 {
        return Err(Error::Config("exclusion loss needs at least one scale".into()));
    }
    let (_, _, h, w) = pred_t.dims4()?;
    let need = 1usize << scales;
    if h < need || w < need {
        return Err(Error::shape(format!(
            "{h}x{w} is too small for {scales} exclusion scales (needs {need}x{need})"
        )));
    }
    let mut t = pred_t.clone();
    let mut r = pred_r.clone();
    let mut total: Option<Tensor> = None;
    for level in 0..scales {
        if level > 0 {
            t = t.avg_pool2d(2)?;
            r = r.avg_pool2d(2)?;
        }
        let (tdx, tdy) = image_gradients(&t)?;
        let (rdx, rdy) = image_gradients(&r)?;
        let lx = exclusion_direction(&tdx, &rdx, eta)?;
        let ly = exclusion_direction(&tdy, &rdy, eta)?;
        let level_loss = ((lx + ly)? * 0.5)?;
        total = Some(match total {
            None => level_loss,
            Some(acc) => (acc + level_loss)?,
        });
    }
    Ok((total.expect("at least one scale") / scales as f64)?)
}

/// Mean absolute value of `input - T - R - residue`.
pub fn r3_loss(input: &Tensor, pred_t: &Tensor, pred_r: &Tensor, residue: &Tensor) -> Result<Tensor> {
    same_shape(input, pred_t, "reconstruction loss")?;
    same_shape(input, pred_r, "reconstruction loss")?;
    same_shape(input, residue, "reconstruction loss")?;
    mean_abs(&(((input - pred_t)? - pred_r)? - residue)?)
}

/// Differentiable total plus its per-term breakdown.
pub struct LossTerms {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Evaluates every loss term and the weighted total.
pub fn total_loss(
    input: &Tensor,
    decomposition: &Decomposition,
    gt_t: &Tensor,
    gt_r: Option<&Tensor>,
    weights: &LossWeights,
    reconstruction: ReconstructionMode,
    extractor: &dyn FeatureExtractor,
) -> Result<LossTerms> {
    weights.validate()?;
    let (pt, pr) = (&decomposition.transmission, &decomposition.reflection);
    let pixel = pixel_loss(pt, pr, gt_t, gt_r, weights.alpha)?;
    let perceptual = perceptual_loss(pt, gt_t, extractor, &weights.perceptual_layers)?;
    let exclusion = exclusion_loss(pt, pr, weights.exclusion_scales, weights.eta)?;
    let recon = match reconstruction {
        ReconstructionMode::Off => None,
        ReconstructionMode::Linear => Some(r3_loss(input, pt, pr, &pt.zeros_like()?)?),
        ReconstructionMode::Residual => Some(r3_loss(input, pt, pr, &decomposition.residue)?),
    };
    let mut total = ((&pixel + (&perceptual * weights.beta_perceptual)?)? + (&exclusion * weights.beta_exclusion)?)?;
    if let Some(rec) = &recon {
        total = (total + (rec * weights.beta_reconstruction)?)?;
    }
    let breakdown = LossBreakdown {
        pixel: scalar(&pixel)?,
        perceptual: scalar(&perceptual)?,
        exclusion: scalar(&exclusion)?,
        reconstruction: match &recon {
            Some(rec) => scalar(rec)?,
            None => 0.0,
        },
        total: scalar(&total)?,
    };
    Ok(LossTerms { total, breakdown })
}
