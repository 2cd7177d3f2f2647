mod common;

use candle_core::{DType, Device, Tensor};
use dsrnet::backbone::{Backbone, FeatureExtractor};
use dsrnet::losses::{
    exclusion_loss, image_gradients, perceptual_loss, pixel_loss, r3_loss, total_loss, EtaPolicy, LossWeights,
    ReconstructionMode,
};
use dsrnet::model::Decomposition;
use dsrnet::{Error, Result};
use proptest::prelude::*;

use common::oracle::{self, Grid};

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

fn batch(seed: u64, h: usize, w: usize) -> Tensor {
    common::random_batch(seed, h, w, DType::F64)
}

fn transposed(t: &Tensor) -> Tensor {
    t.transpose(2, 3).unwrap().contiguous().unwrap()
}

/// Taps: the image itself and its 2x2 average pool. Commutes with transposition.
struct PoolStub;

impl FeatureExtractor for PoolStub {
    fn taps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone(), x.avg_pool2d(2)?])
    }
}

struct Identity;

impl FeatureExtractor for Identity {
    fn taps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

fn decomposition(t: &Tensor, r: &Tensor, residue: &Tensor) -> Decomposition {
    Decomposition {
        transmission: t.clone(),
        reflection: r.clone(),
        residue: residue.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn terms_are_non_negative(seed in any::<u64>(), h in 8usize..=12, w in 8usize..=12) {
        let (pt, pr, gt, gr, input) = (batch(seed, h, w), batch(seed ^ 1, h, w), batch(seed ^ 2, h, w), batch(seed ^ 3, h, w), batch(seed ^ 4, h, w));
        let phi = (batch(seed ^ 5, h, w) - 0.5).unwrap();
        prop_assert!(scalar(&pixel_loss(&pt, &pr, &gt, Some(&gr), 2.0).unwrap()) >= 0.0);
        prop_assert!(scalar(&perceptual_loss(&pt, &gt, &PoolStub, &[0.3, 0.7]).unwrap()) >= 0.0);
        for eta in [EtaPolicy::Unit, EtaPolicy::BalanceSecond, EtaPolicy::BalanceFirst] {
            prop_assert!(scalar(&exclusion_loss(&pt, &pr, 3, eta).unwrap()) >= 0.0);
        }
        prop_assert!(scalar(&r3_loss(&input, &pt, &pr, &phi).unwrap()) >= 0.0);
    }

    #[test]
    fn exact_residue_zeroes_reconstruction(seed in any::<u64>(), h in 1usize..=9, w in 1usize..=9) {
        let (input, pt, pr) = (batch(seed, h, w), batch(seed ^ 7, h, w), batch(seed ^ 8, h, w));
        let phi = ((&input - &pt).unwrap() - &pr).unwrap();
        prop_assert_eq!(scalar(&r3_loss(&input, &pt, &pr, &phi).unwrap()), 0.0);
    }

    #[test]
    fn exclusion_symmetric_under_role_swap(seed in any::<u64>(), h in 4usize..=12, w in 4usize..=12, scales in 1usize..=2) {
        let (t, r) = (batch(seed, h, w), (batch(seed ^ 9, h, w) * 0.3).unwrap());
        for eta in [EtaPolicy::Unit, EtaPolicy::BalanceSecond, EtaPolicy::BalanceFirst] {
            let a = scalar(&exclusion_loss(&t, &r, scales, eta).unwrap());
            let b = scalar(&exclusion_loss(&r, &t, scales, eta.swapped()).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12), "{eta:?}: {a} vs {b}");
        }
    }

    #[test]
    fn losses_invariant_under_transposition(seed in any::<u64>(), h in 8usize..=12, w in 8usize..=12) {
        let (pt, pr, gt, gr, input, phi) = (batch(seed, h, w), batch(seed ^ 1, h, w), batch(seed ^ 2, h, w), batch(seed ^ 3, h, w), batch(seed ^ 4, h, w), batch(seed ^ 5, h, w));
        let tr = transposed;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);
        let p = |a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor| scalar(&pixel_loss(a, b, c, Some(d), 2.0).unwrap());
        prop_assert!(close(p(&pt, &pr, &gt, &gr), p(&tr(&pt), &tr(&pr), &tr(&gt), &tr(&gr))));
        let q = |a: &Tensor, b: &Tensor| scalar(&perceptual_loss(a, b, &PoolStub, &[0.4, 0.6]).unwrap());
        prop_assert!(close(q(&pt, &gt), q(&tr(&pt), &tr(&gt))));
        let e = |a: &Tensor, b: &Tensor| scalar(&exclusion_loss(a, b, 3, EtaPolicy::BalanceSecond).unwrap());
        prop_assert!(close(e(&pt, &pr), e(&tr(&pt), &tr(&pr))));
        let r = |a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor| scalar(&r3_loss(a, b, c, d).unwrap());
        prop_assert!(close(r(&input, &pt, &pr, &phi), r(&tr(&input), &tr(&pt), &tr(&pr), &tr(&phi))));
    }

    #[test]
    fn total_is_weighted_sum_of_recomputed_terms(
        seed in any::<u64>(),
        alpha in 0.0f64..4.0,
        b1 in 0.0f64..1.0,
        b2 in 0.0f64..2.0,
        b3 in 0.0f64..1.0,
    ) {
        let (h, w) = (16, 16);
        let (input, pt, pr, gt, gr) = (batch(seed, h, w), batch(seed ^ 1, h, w), batch(seed ^ 2, h, w), batch(seed ^ 3, h, w), batch(seed ^ 4, h, w));
        let phi = (batch(seed ^ 5, h, w) - 0.5).unwrap();
        let weights = LossWeights {
            alpha,
            beta_perceptual: b1,
            beta_exclusion: b2,
            beta_reconstruction: b3,
            perceptual_layers: vec![1.0],
            ..LossWeights::default()
        };
        let terms = total_loss(&input, &decomposition(&pt, &pr, &phi), &gt, Some(&gr), &weights, ReconstructionMode::Residual, &Identity).unwrap();
        let pixel = oracle::pixel(&Grid::from_tensor(&pt), &Grid::from_tensor(&pr), &Grid::from_tensor(&gt), Some(&Grid::from_tensor(&gr)), alpha);
        let perceptual = Grid::from_tensor(&(&pt - &gt).unwrap()).data.iter().map(|v| v.abs()).sum::<f64>() / (3 * h * w) as f64;
        let exclusion = oracle::exclusion(&Grid::from_tensor(&pt), &Grid::from_tensor(&pr), 3, true);
        let resid = Grid::from_tensor(&(((&input - &pt).unwrap() - &pr).unwrap() - &phi).unwrap());
        let recon = resid.data.iter().map(|v| v.abs()).sum::<f64>() / resid.data.len() as f64;
        let expected = pixel + b1 * perceptual + b2 * exclusion + b3 * recon;
        let b = terms.breakdown;
        prop_assert!((b.pixel - pixel).abs() < 1e-12);
        prop_assert!((b.perceptual - perceptual).abs() < 1e-12);
        prop_assert!((b.exclusion - exclusion).abs() < 1e-12);
        prop_assert!((b.reconstruction - recon).abs() < 1e-12);
        prop_assert!((b.total - expected).abs() < 1e-12, "{} vs {expected}", b.total);
        prop_assert!((scalar(&terms.total) - b.total).abs() == 0.0);
    }
}

#[test]
fn exclusion_matches_elementwise_oracle() {
    for (seed, h, w, scales) in [(1, 8, 8, 1), (2, 9, 13, 2), (3, 16, 12, 3)] {
        let (t, r) = (batch(seed, h, w), batch(seed + 100, h, w));
        for (eta, balance) in [(EtaPolicy::BalanceSecond, true), (EtaPolicy::Unit, false)] {
            let got = scalar(&exclusion_loss(&t, &r, scales, eta).unwrap());
            let want = oracle::exclusion(&Grid::from_tensor(&t), &Grid::from_tensor(&r), scales, balance);
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }
    // both layers the same horizontal ramp
    let (h, w, step) = (6, 9, 0.1);
    let data: Vec<f64> = (0..3 * h * w).map(|i| (i % w) as f64 * step).collect();
    let ramp = Tensor::from_vec(data, (1, 3, h, w), &Device::Cpu).unwrap();
    let got = scalar(&exclusion_loss(&ramp, &ramp, 1, EtaPolicy::BalanceSecond).unwrap());
    let eta2 = step / (step + 1e-6);
    let psi = step.tanh() * (eta2 * step).tanh();
    assert!(got > 0.0);
    assert!((got - 0.5 * psi * psi).abs() < 1e-15, "{got}");
}

#[test]
fn exclusion_vanishes_with_one_flat_layer() {
    let t = batch(4, 12, 12);
    let flat = Tensor::full(0.4f64, (1, 3, 12, 12), &Device::Cpu).unwrap();
    assert_eq!(scalar(&exclusion_loss(&t, &flat, 3, EtaPolicy::BalanceSecond).unwrap()), 0.0);
    assert_eq!(scalar(&exclusion_loss(&flat, &t, 3, EtaPolicy::Unit).unwrap()), 0.0);
}

#[test]
fn pixel_matches_oracle() {
    let (pt, pr, gt, gr) = (batch(1, 7, 5), batch(2, 7, 5), batch(3, 7, 5), batch(4, 7, 5));
    let g = Grid::from_tensor;
    for alpha in [0.0, 2.0] {
        let got = scalar(&pixel_loss(&pt, &pr, &gt, Some(&gr), alpha).unwrap());
        assert!((got - oracle::pixel(&g(&pt), &g(&pr), &g(&gt), Some(&g(&gr)), alpha)).abs() < 1e-14);
        let got = scalar(&pixel_loss(&pt, &pr, &gt, None, alpha).unwrap());
        assert!((got - oracle::pixel(&g(&pt), &g(&pr), &g(&gt), None, alpha)).abs() < 1e-14);
    }
}

#[test]
fn identity_stub_reduces_perceptual_to_l1() {
    let (a, b) = (batch(5, 6, 6), batch(6, 6, 6));
    let l1 = Grid::from_tensor(&(&a - &b).unwrap()).data.iter().map(|v| v.abs()).sum::<f64>() / 108.0;
    assert!((scalar(&perceptual_loss(&a, &b, &Identity, &[1.0]).unwrap()) - l1).abs() < 1e-15);
    assert_eq!(scalar(&perceptual_loss(&a, &a, &Identity, &[1.0]).unwrap()), 0.0);
    assert_eq!(scalar(&perceptual_loss(&a, &b, &PoolStub, &[0.0, 0.0]).unwrap()), 0.0);
}

#[test]
fn perceptual_through_backbone_vanishes_on_match() {
    let bb = Backbone::random(&common::tiny_model().backbone, 1, DType::F64, &Device::Cpu).unwrap();
    let a = batch(7, 16, 16);
    assert_eq!(scalar(&perceptual_loss(&a, &a, &bb, &dsrnet::losses::DEFAULT_PERCEPTUAL_WEIGHTS).unwrap()), 0.0);
    assert!(scalar(&perceptual_loss(&a, &batch(8, 16, 16), &bb, &dsrnet::losses::DEFAULT_PERCEPTUAL_WEIGHTS).unwrap()) > 0.0);
}

#[test]
fn r3_hand_value() {
    let full = |v: f64| Tensor::full(v, (1, 3, 4, 4), &Device::Cpu).unwrap();
    let got = scalar(&r3_loss(&full(1.0), &full(0.5), &full(0.3), &full(0.0)).unwrap());
    assert!((got - 0.2).abs() < 1e-15);
    assert_eq!(scalar(&r3_loss(&full(0.0), &full(0.0), &full(0.0), &full(0.0)).unwrap()), 0.0);
}

#[test]
fn total_examples() {
    let (h, w) = (16, 16);
    let (t, r) = (batch(1, h, w), (batch(2, h, w) * 0.5).unwrap());
    let input = (&t + &r).unwrap();
    let zero = t.zeros_like().unwrap();
    let weights = LossWeights::default();
    let bb = Backbone::random(&common::tiny_model().backbone, 2, DType::F64, &Device::Cpu).unwrap();

    // perfect layers with the exact residue: only the exclusion term remains
    let terms = total_loss(&input, &decomposition(&t, &r, &zero), &t, Some(&r), &weights, ReconstructionMode::Residual, &bb).unwrap();
    let b = terms.breakdown;
    assert_eq!((b.pixel, b.perceptual), (0.0, 0.0));
    // the residue I - T - R cancels only up to rounding
    assert!(b.reconstruction < 1e-15, "{}", b.reconstruction);
    assert!(b.exclusion > 0.0);
    assert!((b.total - b.exclusion).abs() < 1e-15);

    // only the reconstruction term nonzero, at 0.2
    let flat = |v: f64| Tensor::full(v, (1, 3, h, w), &Device::Cpu).unwrap();
    let (ft, fr) = (flat(0.5), flat(0.3));
    let terms = total_loss(&flat(1.0), &decomposition(&ft, &fr, &flat(0.0)), &ft, Some(&fr), &weights, ReconstructionMode::Residual, &bb).unwrap();
    assert!((terms.breakdown.reconstruction - 0.2).abs() < 1e-15);
    assert!((terms.breakdown.total - 0.04).abs() < 1e-15);

    // switching the term off removes it from the total
    let off = total_loss(&flat(1.0), &decomposition(&ft, &fr, &flat(0.0)), &ft, Some(&fr), &weights, ReconstructionMode::Off, &bb).unwrap();
    assert_eq!(off.breakdown.reconstruction, 0.0);
    assert_eq!(off.breakdown.total, 0.0);

    // linear reconstruction ignores the residue
    let lin = total_loss(&flat(1.0), &decomposition(&ft, &fr, &flat(0.2)), &ft, Some(&fr), &weights, ReconstructionMode::Linear, &bb).unwrap();
    assert!((lin.breakdown.reconstruction - 0.2).abs() < 1e-15);
}

#[test]
fn shape_errors() {
    let one = Tensor::zeros((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap();
    assert!(matches!(image_gradients(&one), Err(Error::Shape(_))));
    let (a, b) = (batch(1, 8, 8), batch(2, 8, 9));
    assert!(matches!(pixel_loss(&a, &a, &b, None, 2.0), Err(Error::Shape(_))));
    assert!(matches!(r3_loss(&a, &a, &a, &b), Err(Error::Shape(_))));
    assert!(matches!(exclusion_loss(&a, &b, 1, EtaPolicy::Unit), Err(Error::Shape(_))));
    let small = batch(3, 4, 4);
    assert!(matches!(exclusion_loss(&small, &small, 3, EtaPolicy::Unit), Err(Error::Shape(_))));
}
