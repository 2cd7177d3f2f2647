//! Parameter storage and the small set of layers the network is assembled from.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named, seeded collection of trainable tensors.
///
/// Layers hold clones of the registered tensors; those clones share storage with the
/// [`Var`]s kept here, so in-place updates through [`ParamStore::vars`] are visible
/// to every layer.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: impl Into<Shape>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn uniform(&mut self, name: &str, shape: impl Into<Shape>, bound: f64) -> Result<Tensor> {
        let shape = shape.into();
        let values = (0..shape.elem_count())
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Tensor> {
        let shape = shape.into();
        self.register(name, vec![value; shape.elem_count()], shape)
    }

    /// Builds the two streams of a per-stream layer. With `tied`, the reflection stream
    /// replays the random draws of the transmission stream, so both start identical.
    pub fn dual<M>(
        &mut self,
        name: &str,
        tied: bool,
        mut build: impl FnMut(&mut Self, &str) -> Result<M>,
    ) -> Result<Dual<M>> {
        let before = self.rng.clone();
        let t = build(self, &format!("{name}.t"))?;
        if tied {
            let after = std::mem::replace(&mut self.rng, before);
            let r = build(self, &format!("{name}.r"))?;
            self.rng = after;
            Ok(Dual { t, r })
        } else {
            let r = build(self, &format!("{name}.r"))?;
            Ok(Dual { t, r })
        }
    }

    pub fn conv2d(&mut self, name: &str, spec: ConvSpec) -> Result<Conv2d> {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform(
            &format!("{name}.weight"),
            (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
            bound,
        )?;
        let bias = if spec.bias {
            Some(self.uniform(&format!("{name}.bias"), spec.out_channels, bound)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn depthwise3x3(&mut self, name: &str, channels: usize) -> Result<DepthwiseConv3x3> {
        let bound = 1.0 / 3.0;
        Ok(DepthwiseConv3x3 {
            weight: self.uniform(&format!("{name}.weight"), (channels, 1, 3, 3), bound)?,
            bias: self.uniform(&format!("{name}.bias"), channels, bound)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, channels: usize) -> Result<LayerNorm2d> {
        Ok(LayerNorm2d {
            weight: self.constant(&format!("{name}.weight"), channels, 1.0)?,
            bias: self.constant(&format!("{name}.bias"), channels, 0.0)?,
            eps: 1e-6,
        })
    }

    /// Copies of every parameter value, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let values = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
                Ok((k.clone(), values))
            })
            .collect()
    }
}

/// A per-stream pair of layers: one for the transmission stream, one for the reflection stream.
#[derive(Clone, Debug)]
pub struct Dual<M> {
    pub t: M,
    pub r: M,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Normalizes every pixel across channels, then applies a per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.weight.elem_count() {
            return Err(Error::shape(format!(
                "layer norm over {} channels applied to {c}",
                self.weight.elem_count()
            )));
        }
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// 3x3 depthwise convolution with zero padding 1.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let y = depthwise_conv3x3(x, &self.weight)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Depthwise 3x3 convolution of `(N, C, H, W)` by a `(C, 1, 3, 3)` kernel, zero padded.
pub fn depthwise_conv3x3(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if kernel.dims() != [c, 1, 3, 3] {
        return Err(Error::shape(format!(
            "depthwise kernel {:?} does not match {c} channels",
            kernel.dims()
        )));
    }
    if x.dtype() != kernel.dtype() {
        return Err(Error::shape("depthwise input and kernel dtypes differ"));
    }
    Ok(x.contiguous()?.apply_op2(&kernel.contiguous()?, DepthwiseConv)?)
}

struct DepthwiseConv;

struct DepthwiseKernelGrad;

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("depthwise conv expects contiguous operands"),
    }
}

fn dw_forward<T: WithDType>(x: &[T], k: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let zero = T::from_f64(0.0);
    let mut out = vec![zero; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            let src = &x[plane..plane + h * w];
            let dst = &mut out[plane..plane + h * w];
            let kc = &k[ch * 9..ch * 9 + 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let kv = kc[ky * 3 + kx];
                    // output (y, x) reads input (y + ky - 1, x + kx - 1)
                    let y0 = if ky == 0 { 1 } else { 0 };
                    let y1 = if ky == 2 { h - 1 } else { h };
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let drow = &mut dst[y * w + x0..y * w + x1];
                        let srow = &src[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn dw_kernel_grad<T: WithDType>(x: &[T], g: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); c * 9];
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            let src = &x[plane..plane + h * w];
            let grad = &g[plane..plane + h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let y0 = if ky == 0 { 1 } else { 0 };
                    let y1 = if ky == 2 { h - 1 } else { h };
                    let x0 = if kx == 0 { 1 } else { 0 };
                    let x1 = if kx == 2 { w - 1 } else { w };
                    let mut acc = T::from_f64(0.0);
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let grow = &grad[y * w + x0..y * w + x1];
                        let srow = &src[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        for (&gv, &s) in grow.iter().zip(srow) {
                            acc += gv * s;
                        }
                    }
                    out[ch * 9 + ky * 3 + kx] += acc;
                }
            }
        }
    }
    out
}

fn dims_nchw(layout: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    layout.shape().dims4()
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise-conv3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims_nchw(l1)?;
        let shape = l1.shape().clone();
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => {
                let out = dw_forward(contiguous_slice(x, l1)?, contiguous_slice(k, l2)?, n, c, h, w);
                Ok((CpuStorage::F32(out), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(k)) => {
                let out = dw_forward(contiguous_slice(x, l1)?, contiguous_slice(k, l2)?, n, c, h, w);
                Ok((CpuStorage::F64(out), shape))
            }
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 operands"),
        }
    }

    fn bwd(
        &self,
        arg: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        // The input gradient is a correlation with the 180-degree rotated kernel.
        let c = kernel.dim(0)?;
        let rotated = kernel
            .reshape((c, 9))?
            .index_select(&Tensor::new(&[8u32, 7, 6, 5, 4, 3, 2, 1, 0], kernel.device())?, 1)?
            .reshape((c, 1, 3, 3))?;
        let grad = grad.contiguous()?;
        let grad_arg = grad.apply_op2(&rotated, DepthwiseConv)?;
        let grad_kernel = arg.contiguous()?.apply_op2_no_bwd(&grad, &DepthwiseKernelGrad)?;
        Ok((Some(grad_arg), Some(grad_kernel)))
    }
}

impl CustomOp2 for DepthwiseKernelGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv3x3-kernel-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims_nchw(l1)?;
        let shape = Shape::from((c, 1, 3, 3));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                let out = dw_kernel_grad(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, n, c, h, w);
                Ok((CpuStorage::F32(out), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                let out = dw_kernel_grad(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, n, c, h, w);
                Ok((CpuStorage::F64(out), shape))
            }
            _ => candle_core::bail!("depthwise kernel grad supports matching f32 or f64 operands"),
        }
    }
}

/// Nearest-neighbour x2 spatial upscaling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    upsample_nearest(x, 2)
}

/// Nearest-neighbour upscaling by an integer factor.
///
/// Built from a broadcast so the backward pass accumulates; candle's own
/// nearest upsampling overwrites gradients that reach its input by other paths.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 1 {
        return Ok(x.clone());
    }
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))?)
}

/// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
///
/// candle's max pool scales the gradient of the winning element by the tie
/// fraction, so this is written as a reshape followed by two max reductions.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    let x = if h % 2 == 1 || w % 2 == 1 {
        x.narrow(2, 0, 2 * h2)?.narrow(3, 0, 2 * w2)?
    } else {
        x.clone()
    };
    Ok(x.contiguous()?
        .reshape((n, c, h2, 2, w2, 2))?
        .max(5)?
        .max(3)?)
}

/// Reflect-pads the bottom and right edges of an `(N, C, H, W)` tensor.
pub fn reflect_pad_bottom_right(x: &Tensor, pad_h: usize, pad_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if pad_h >= h.max(2) || pad_w >= w.max(2) {
        return Err(Error::shape(format!(
            "reflect padding ({pad_h}, {pad_w}) too large for {h}x{w}"
        )));
    }
    let index = |len: usize, pad: usize| -> Vec<u32> {
        (0..len + pad)
            .map(|i| if i < len { i } else { 2 * (len - 1) - i } as u32)
            .collect()
    };
    let mut out = x.clone();
    if pad_h > 0 {
        let ids = Tensor::new(index(h, pad_h).as_slice(), x.device())?;
        out = out.index_select(&ids, 2)?;
    }
    if pad_w > 0 {
        let ids = Tensor::new(index(w, pad_w).as_slice(), x.device())?;
        out = out.index_select(&ids, 3)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dw(x: &[f64], k: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = 0.0;
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let (iy, ix) = (y + ky - 1, xx + kx - 1);
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                acc += k[ch * 9 + (ky * 3 + kx) as usize]
                                    * x[ch * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[ch * h * w + y as usize * w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_matches_naive_loops() {
        let (c, h, w) = (3, 5, 4);
        let xs: Vec<f64> = (0..c * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let ks: Vec<f64> = (0..c * 9).map(|i| ((i * 7 % 5) as f64) * 0.25 - 0.5).collect();
        let x = Tensor::from_vec(xs.clone(), (1, c, h, w), &Device::Cpu).unwrap();
        let k = Tensor::from_vec(ks.clone(), (c, 1, 3, 3), &Device::Cpu).unwrap();
        let y: Vec<f64> = depthwise_conv3x3(&x, &k).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y, naive_dw(&xs, &ks, c, h, w));
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 4, 6, 7), &dev).unwrap();
        let k = Tensor::randn(0f32, 1.0, (4, 1, 3, 3), &dev).unwrap();
        let ours = depthwise_conv3x3(&x, &k).unwrap();
        let reference = x.conv2d(&k, 1, 1, 1, 4).unwrap();
        let diff: f32 = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn tied_dual_replays_draws() {
        let mut store = ParamStore::new(3, DType::F64, &Device::Cpu);
        let d = store
            .dual("c", true, |s, n| s.conv2d(n, ConvSpec::new(2, 4, 3)))
            .unwrap();
        let a: Vec<f64> = d.t.weight.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = d.r.weight.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let u = store
            .dual("u", false, |s, n| s.conv2d(n, ConvSpec::new(2, 4, 3)))
            .unwrap();
        let a: Vec<f64> = u.t.weight.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = u.r.weight.flatten_all().unwrap().to_vec1().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new(0, DType::F32, &Device::Cpu);
        store.constant("a", 2, 0.0).unwrap();
        assert!(matches!(store.constant("a", 2, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::from_vec((0..4).map(|v| v as f32).collect::<Vec<_>>(), (1, 1, 1, 4), &Device::Cpu).unwrap();
        let p = reflect_pad_bottom_right(&x, 0, 2).unwrap();
        let v: Vec<f32> = p.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0., 1., 2., 3., 2., 1.]);
    }

    #[test]
    fn layer_norm_normalizes_across_channels() {
        let mut store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let ln = store.layer_norm("ln", 4).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 4, 1, 1), &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
