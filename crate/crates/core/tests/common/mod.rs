#![allow(dead_code)]

pub mod oracle;

use std::path::Path;

use dsrnet::data::{build_synthetic_dataset, BlurConfig, DatasetManifest, SynthesisConfig};
use dsrnet::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth procedural texture: a few oriented sinusoids plus soft discs.
pub fn texture(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
                rng.random_range(0.0..6.3),
                rng.random_range(0.05..0.2),
            ]
        })
        .collect();
    let discs: Vec<[f64; 5]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(4.0..(h.min(w) as f64 / 3.0).max(5.0)),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.0..3.0),
            ]
        })
        .collect();
    let base: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
    Image::from_fn(h, w, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c];
        for (i, wv) in waves.iter().enumerate().filter(|(i, _)| i % 3 == c) {
            v += wv[3] * (wv[0] * yf + wv[1] * xf + wv[2] + i as f64).sin();
        }
        for d in &discs {
            let r = ((yf - d[0]).powi(2) + (xf - d[1]).powi(2)).sqrt();
            let inside = 1.0 / (1.0 + ((r - d[2]) / 1.5).exp());
            v += inside * d[3] * (1.0 + 0.3 * (d[4] + c as f64).cos());
        }
        v.clamp(0.0, 1.0)
    })
}

/// Writes `sources` procedural PNGs into `dir`.
pub fn write_sources(dir: &Path, sources: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..sources {
        texture(seed * 1000 + i as u64, size, size)
            .save_png(dir.join(format!("src_{i:02}.png")))
            .unwrap();
    }
}

/// Synthesizes `count` training pairs of `size` x `size` under `root/data`.
pub fn toy_dataset(root: &Path, count: usize, size: usize, seed: u64) -> DatasetManifest {
    let src = root.join("sources");
    write_sources(&src, 6, size + size / 2, seed);
    let cfg = SynthesisConfig {
        count,
        crop_size: size,
        seed,
        blur: BlurConfig::default(),
        flip: false,
        ..SynthesisConfig::default()
    };
    build_synthetic_dataset(&src, &root.join("data"), &cfg).unwrap()
}

/// A few-thousand-parameter network for fast structural tests.
pub fn tiny_model() -> dsrnet::ModelConfig {
    dsrnet::ModelConfig {
        base_width: 8,
        dsd_levels: 2,
        blocks_per_level: 1,
        backbone: dsrnet::BackboneConfig {
            widths: [4, 4, 8, 8, 8],
            convs: [1, 1, 1, 1, 1],
        },
        ..dsrnet::ModelConfig::default()
    }
}

/// Uniform random `(1, 3, h, w)` tensor.
pub fn random_batch(seed: u64, h: usize, w: usize, dtype: candle_core::DType) -> candle_core::Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    candle_core::Tensor::from_vec(data, (1, 3, h, w), &candle_core::Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0))
}
