//! Reference computations written independently of the library code paths.

use candle_core::{Tensor, Var};
use dsrnet::Image;

/// Channel-split product gate, one element at a time over an `(n, c, h, w)` layout.
pub fn gate(t: &[f64], r: &[f64], dims: (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims;
    let half = c / 2;
    let at = |v: &[f64], b: usize, ch: usize, y: usize, x: usize| v[((b * c + ch) * h + y) * w + x];
    let mut out_t = Vec::with_capacity(n * half * h * w);
    let mut out_r = Vec::with_capacity(n * half * h * w);
    for b in 0..n {
        for ch in 0..half {
            for y in 0..h {
                for x in 0..w {
                    out_t.push(at(t, b, ch, y, x) * at(r, b, ch + half, y, x));
                    out_r.push(at(r, b, ch, y, x) * at(t, b, ch + half, y, x));
                }
            }
        }
    }
    (out_t, out_r)
}

/// Screen blend of one value, in its complement-product form.
pub fn blend(t: f64, r: f64, g1: f64, g2: f64) -> f64 {
    1.0 - (1.0 - g1 * t) * (1.0 - g2 * r)
}

/// Mean local SSIM computed window by window with an explicit 2-D Gaussian.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    let (h, w) = a.dims();
    let k = 11usize;
    let mut win = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for c in 0..3 {
        let mut sum = 0.0;
        for top in 0..=h - k {
            for left in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i][j] / total;
                        ma += g * a.get(top + i, left + j, c);
                        mb += g * b.get(top + i, left + j, c);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i][j] / total;
                        let da = a.get(top + i, left + j, c) - ma;
                        let db = b.get(top + i, left + j, c) - mb;
                        va += g * da * da;
                        vb += g * db * db;
                        cov += g * da * db;
                    }
                }
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        acc += sum / ((h - k + 1) * (w - k + 1)) as f64;
    }
    acc / 3.0
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn with_element(var: &Var, index: usize, value: f64) {
    let mut data: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    data[index] = value;
    let t = Tensor::from_vec(data, var.shape(), var.device()).unwrap();
    var.set(&t).unwrap();
}

/// Central difference of `f` with respect to one element of `var`; restores the value.
pub fn central_difference(var: &Var, index: usize, step: f64, f: &mut dyn FnMut() -> f64) -> f64 {
    let original: f64 = var.as_tensor().flatten_all().unwrap().get(index).unwrap().to_scalar().unwrap();
    with_element(var, index, original + step);
    let plus = f();
    with_element(var, index, original - step);
    let minus = f();
    with_element(var, index, original);
    (plus - minus) / (2.0 * step)
}

/// Analytic gradient entry of `var` from a scalar loss.
pub fn analytic(loss: &Tensor, var: &Var, index: usize) -> f64 {
    let grads = loss.backward().unwrap();
    match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all().unwrap().get(index).unwrap().to_scalar().unwrap(),
        None => 0.0,
    }
}

/// A dense `(n, c, h, w)` grid for the loss oracles.
#[derive(Clone, Debug)]
pub struct Grid {
    pub dims: (usize, usize, usize, usize),
    pub data: Vec<f64>,
}

impl Grid {
    pub fn from_tensor(t: &Tensor) -> Self {
        let dims = t.dims4().unwrap();
        let data = t.flatten_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_vec1().unwrap();
        Self { dims, data }
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, ch, h, w) = self.dims;
        self.data[((b * ch + c) * h + y) * w + x]
    }

    fn pooled(&self) -> Self {
        let (n, c, h, w) = self.dims;
        let (h2, w2) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(n * c * h2 * w2);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h2 {
                    for x in 0..w2 {
                        let s = self.at(b, ch, 2 * y, 2 * x)
                            + self.at(b, ch, 2 * y + 1, 2 * x)
                            + self.at(b, ch, 2 * y, 2 * x + 1)
                            + self.at(b, ch, 2 * y + 1, 2 * x + 1);
                        data.push(s / 4.0);
                    }
                }
            }
        }
        Self { dims: (n, c, h2, w2), data }
    }

    /// Forward differences along x then y, valid region only.
    fn differences(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = self.dims;
        let (mut dx, mut dy) = (Vec::new(), Vec::new());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if x + 1 < w {
                            dx.push(self.at(b, ch, y, x + 1) - self.at(b, ch, y, x));
                        }
                        if y + 1 < h {
                            dy.push(self.at(b, ch, y + 1, x) - self.at(b, ch, y, x));
                        }
                    }
                }
            }
        }
        (dx, dy)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Squared error of both layers plus `alpha` times the direction-averaged gradient L1 error.
pub fn pixel(pt: &Grid, pr: &Grid, gt: &Grid, gr: Option<&Grid>, alpha: f64) -> f64 {
    let layer = |p: &Grid, g: &Grid| {
        let mse = mean(&p.data.iter().zip(&g.data).map(|(a, b)| (a - b) * (a - b)).collect::<Vec<_>>());
        let (px, py) = p.differences();
        let (gx, gy) = g.differences();
        let l1 = |a: &[f64], b: &[f64]| mean(&a.iter().zip(b).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>());
        mse + alpha * 0.5 * (l1(&px, &gx) + l1(&py, &gy))
    };
    layer(pt, gt) + gr.map_or(0.0, |g| layer(pr, g))
}

/// Exclusion penalty with the second layer's gradients rescaled to the first's mean
/// magnitude (or unscaled when `balance` is false), averaged over directions and levels.
pub fn exclusion(t: &Grid, r: &Grid, scales: usize, balance: bool) -> f64 {
    let (mut t, mut r) = (t.clone(), r.clone());
    let mut total = 0.0;
    for level in 0..scales {
        if level > 0 {
            t = t.pooled();
            r = r.pooled();
        }
        let (tx, ty) = t.differences();
        let (rx, ry) = r.differences();
        let direction = |a: &[f64], b: &[f64]| {
            let eta2 = if balance {
                mean(&a.iter().map(|v| v.abs()).collect::<Vec<_>>())
                    / (mean(&b.iter().map(|v| v.abs()).collect::<Vec<_>>()) + 1e-6)
            } else {
                1.0
            };
            mean(
                &a.iter()
                    .zip(b)
                    .map(|(u, v)| {
                        let psi = u.abs().tanh() * (eta2 * v.abs()).tanh();
                        psi * psi
                    })
                    .collect::<Vec<_>>(),
            )
        };
        total += 0.5 * (direction(&tx, &rx) + direction(&ty, &ry));
    }
    total / scales as f64
}
