//! Forward and input-gradient kernels for the layer types the IR supports.
//!
//! All kernels are pure functions over NCHW (or NC for dense) tensors. Reductions
//! accumulate in `f64` and round once when storing, so results are independent of
//! how callers batch their inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// `[out_ch, in_ch, kh, kw]`
    pub weight: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvParams {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 4 {
            return Err(Error::shape("conv", format!("weight must be rank 4, got {:?}", ws)));
        }
        if self.bias.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv",
                format!("bias {:?} does not match {} output channels", self.bias.shape(), ws[0]),
            ));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::shape("conv", "stride must be positive"));
        }
        Ok(())
    }

    /// Output shape for an `[N, C, H, W]` input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let ws = self.weight.shape();
        if input.len() != 4 {
            return Err(Error::shape("conv", format!("input must be rank 4, got {:?}", input)));
        }
        if input[1] != ws[1] {
            return Err(Error::shape(
                "conv",
                format!("input has {} channels, weight expects {}", input[1], ws[1]),
            ));
        }
        let (ph, pw) = self.padding;
        let (sh, sw) = self.stride;
        let (hp, wp) = (input[2] + 2 * ph, input[3] + 2 * pw);
        if hp < ws[2] || wp < ws[3] {
            return Err(Error::shape(
                "conv",
                format!("kernel {}x{} does not fit padded input {}x{}", ws[2], ws[3], hp, wp),
            ));
        }
        Ok(vec![input[0], ws[0], (hp - ws[2]) / sh + 1, (wp - ws[3]) / sw + 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseParams {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        if ws.len() != 2 {
            return Err(Error::shape("dense", format!("weight must be rank 2, got {:?}", ws)));
        }
        if self.bias.shape() != [ws[0]] {
            return Err(Error::shape(
                "dense",
                format!("bias {:?} does not match {} outputs", self.bias.shape(), ws[0]),
            ));
        }
        Ok(())
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let ws = self.weight.shape();
        if input.len() != 2 || input[1] != ws[1] {
            return Err(Error::shape(
                "dense",
                format!("input {:?} incompatible with weight {:?}", input, ws),
            ));
        }
        Ok(vec![input[0], ws[0]])
    }
}

/// Inference-mode batch normalization with frozen statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f32,
}

impl BnParams {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.len() != c {
                return Err(Error::shape(
                    "bn",
                    format!("{} has {} entries, gamma has {}", name, t.len(), c),
                ));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bn epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.running_var.data().iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::InvalidArgument("bn running_var must be >= 0".into()));
        }
        Ok(())
    }

    /// `s = sqrt(var + eps)` for channel `c`.
    pub fn std(&self, c: usize) -> f64 {
        (self.running_var.data()[c] as f64 + self.epsilon as f64).sqrt()
    }

    /// Multiplier `gamma / s` applied to the input of channel `c`.
    pub fn scale(&self, c: usize) -> f64 {
        self.gamma.data()[c] as f64 / self.std(c)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        self.validate()?;
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::shape(
                "bn",
                format!("input {:?} does not have {} channels in dim 1", shape, self.channels()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolParams {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 {
            return Err(Error::shape("pool", format!("input must be rank 4, got {:?}", input)));
        }
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || input[2] < kh || input[3] < kw {
            return Err(Error::shape(
                "pool",
                format!("kernel {:?} / stride {:?} invalid for {:?}", self.kernel, self.stride, input),
            ));
        }
        Ok(vec![input[0], input[1], (input[2] - kh) / sh + 1, (input[3] - kw) / sw + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReluMode {
    Standard,
    /// Also masks negative upstream gradients.
    Guided,
}

pub fn conv2d_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let out_shape = p.output_shape(input.shape())?;
    let (n, ic, h, w) = dims4(input.shape());
    let (oc, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let (kh, kw) = (p.weight.shape()[2], p.weight.shape()[3]);
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let x = input.data();
    let wt = p.weight.data();

    let mut out = vec![0f32; out_shape.iter().product()];
    let mut acc = vec![0f64; oh * ow];
    for b in 0..n {
        for o in 0..oc {
            acc.fill(p.bias.data()[o] as f64);
            for c in 0..ic {
                let plane = &x[(b * ic + c) * h * w..(b * ic + c + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((o * ic + c) * kh + ky) * kw + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let arow = &mut acc[y * ow..(y + 1) * ow];
                            for (xo, a) in arow.iter_mut().enumerate() {
                                let ix = (xo * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    *a += wv * row[ix as usize] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Gradient of `sum(output_grad * conv2d_forward(x))` with respect to `x`.
pub fn conv2d_input_grad(output_grad: &Tensor, p: &ConvParams, input_shape: &[usize]) -> Result<Tensor> {
    let out_shape = p.output_shape(input_shape)?;
    if output_grad.shape() != out_shape.as_slice() {
        return Err(Error::shape(
            "conv",
            format!("output grad {:?}, expected {:?}", output_grad.shape(), out_shape),
        ));
    }
    let (n, ic, h, w) = dims4(input_shape);
    let (oc, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let (kh, kw) = (p.weight.shape()[2], p.weight.shape()[3]);
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let g = output_grad.data();
    let wt = p.weight.data();

    let mut acc = vec![0f64; n * ic * h * w];
    for b in 0..n {
        for c in 0..ic {
            let plane = &mut acc[(b * ic + c) * h * w..(b * ic + c + 1) * h * w];
            for o in 0..oc {
                let gplane = &g[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((o * ic + c) * kh + ky) * kw + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = (y * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for xo in 0..ow {
                                let ix = (xo * sw + kx) as isize - pw as isize;
                                if ix >= 0 && ix < w as isize {
                                    plane[iy * w + ix as usize] += wv * gplane[y * ow + xo] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

pub fn dense_forward(input: &Tensor, p: &DenseParams) -> Result<Tensor> {
    let out_shape = p.output_shape(input.shape())?;
    let (n, inf, outf) = (out_shape[0], input.shape()[1], out_shape[1]);
    let (x, wt, bias) = (input.data(), p.weight.data(), p.bias.data());
    let mut out = Vec::with_capacity(n * outf);
    for b in 0..n {
        let row = &x[b * inf..(b + 1) * inf];
        for o in 0..outf {
            let wrow = &wt[o * inf..(o + 1) * inf];
            let acc: f64 = bias[o] as f64
                + wrow
                    .iter()
                    .zip(row)
                    .map(|(&w, &v)| w as f64 * v as f64)
                    .sum::<f64>();
            out.push(acc as f32);
        }
    }
    Tensor::new(out_shape, out)
}

pub fn dense_input_grad(output_grad: &Tensor, p: &DenseParams, input_shape: &[usize]) -> Result<Tensor> {
    let out_shape = p.output_shape(input_shape)?;
    if output_grad.shape() != out_shape.as_slice() {
        return Err(Error::shape(
            "dense",
            format!("output grad {:?}, expected {:?}", output_grad.shape(), out_shape),
        ));
    }
    let (n, inf, outf) = (input_shape[0], input_shape[1], out_shape[1]);
    let (g, wt) = (output_grad.data(), p.weight.data());
    let mut out = Vec::with_capacity(n * inf);
    for b in 0..n {
        let grow = &g[b * outf..(b + 1) * outf];
        for i in 0..inf {
            let acc: f64 = (0..outf).map(|o| wt[o * inf + i] as f64 * grow[o] as f64).sum();
            out.push(acc as f32);
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Applies `gamma * (x - mean) / sqrt(var + eps) + beta` per channel (dim 1).
pub fn bn_forward(input: &Tensor, p: &BnParams) -> Result<Tensor> {
    p.check_input(input.shape())?;
    let (c, inner) = channel_layout(input.shape());
    let mut out = input.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / inner) % c;
        let centered = *v as f64 - p.running_mean.data()[ch] as f64;
        *v = (p.scale(ch) * centered + p.beta.data()[ch] as f64) as f32;
    }
    Ok(out)
}

pub fn bn_input_grad(output_grad: &Tensor, p: &BnParams) -> Result<Tensor> {
    p.check_input(output_grad.shape())?;
    let (c, inner) = channel_layout(output_grad.shape());
    let mut out = output_grad.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / inner) % c;
        *v = (p.scale(ch) * *v as f64) as f32;
    }
    Ok(out)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(output_grad: &Tensor, forward_input: &Tensor, mode: ReluMode) -> Result<Tensor> {
    output_grad.zip_map(forward_input, |g, x| {
        let pass = x > 0.0 && (mode == ReluMode::Standard || g > 0.0);
        if pass {
            g
        } else {
            0.0
        }
    })
}

/// Flat input index of the maximum of each pooling window; ties go to the lowest index.
pub fn maxpool2d_argmax(input: &Tensor, p: &PoolParams) -> Result<Vec<usize>> {
    let out_shape = p.output_shape(input.shape())?;
    let (n, c, h, w) = dims4(input.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + (y * p.stride.0) * w + xo * p.stride.1;
                for ky in 0..p.kernel.0 {
                    for kx in 0..p.kernel.1 {
                        let i = base + (y * p.stride.0 + ky) * w + xo * p.stride.1 + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok(idx)
}

pub fn maxpool2d_forward(input: &Tensor, p: &PoolParams) -> Result<Tensor> {
    let out_shape = p.output_shape(input.shape())?;
    let idx = maxpool2d_argmax(input, p)?;
    Tensor::new(out_shape, idx.iter().map(|&i| input.data()[i]).collect())
}

/// Routes each output gradient entirely to its window's argmax.
pub fn maxpool2d_backward(output_grad: &Tensor, forward_input: &Tensor, p: &PoolParams) -> Result<Tensor> {
    let out_shape = p.output_shape(forward_input.shape())?;
    if output_grad.shape() != out_shape.as_slice() {
        return Err(Error::shape(
            "maxpool",
            format!("output grad {:?}, expected {:?}", output_grad.shape(), out_shape),
        ));
    }
    let idx = maxpool2d_argmax(forward_input, p)?;
    let mut acc = vec![0f64; forward_input.len()];
    for (&i, &g) in idx.iter().zip(output_grad.data()) {
        acc[i] += g as f64;
    }
    Tensor::new(
        forward_input.shape().to_vec(),
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

pub fn avgpool2d_forward(input: &Tensor, p: &PoolParams) -> Result<Tensor> {
    let out_shape = p.output_shape(input.shape())?;
    let (n, c, h, w) = dims4(input.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let area = (p.kernel.0 * p.kernel.1) as f64;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0f64;
                for ky in 0..p.kernel.0 {
                    let row = base + (y * p.stride.0 + ky) * w + xo * p.stride.1;
                    acc += x[row..row + p.kernel.1].iter().map(|&v| v as f64).sum::<f64>();
                }
                out.push((acc / area) as f32);
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn avgpool2d_backward(output_grad: &Tensor, input_shape: &[usize], p: &PoolParams) -> Result<Tensor> {
    let out_shape = p.output_shape(input_shape)?;
    if output_grad.shape() != out_shape.as_slice() {
        return Err(Error::shape(
            "avgpool",
            format!("output grad {:?}, expected {:?}", output_grad.shape(), out_shape),
        ));
    }
    let (n, c, h, w) = dims4(input_shape);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let area = (p.kernel.0 * p.kernel.1) as f64;
    let g = output_grad.data();
    let mut acc = vec![0f64; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let share = g[(plane * oh + y) * ow + xo] as f64 / area;
                for ky in 0..p.kernel.0 {
                    let row = base + (y * p.stride.0 + ky) * w + xo * p.stride.1;
                    for v in &mut acc[row..row + p.kernel.1] {
                        *v += share;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.add(b)
}

/// Collapses every dimension after the batch dimension.
pub fn flatten(input: &Tensor) -> Result<Tensor> {
    input.reshape(&flatten_shape(input.shape())?)
}

pub fn flatten_shape(shape: &[usize]) -> Result<Vec<usize>> {
    if shape.is_empty() {
        return Err(Error::shape("flatten", "cannot flatten a rank-0 tensor"));
    }
    Ok(vec![shape[0], shape[1..].iter().product()])
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

/// `(channels, elements per channel per batch item)` for a tensor with channels in dim 1.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize) {
    (shape[1], shape[2..].iter().product())
}
