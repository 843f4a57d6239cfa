//! Dense row-major `f64` tensors and the handful of layer transforms the stems
//! and encoder are built from.
//!
//! Every forward transform has a paired `*_backward` function mapping an
//! upstream gradient to gradients with respect to its inputs. There is no tape:
//! callers keep whatever forward values the backward pass needs.
//! [`fd_gradient`] is the central-difference oracle used to check them.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{CurateError, Result};

/// Default epsilon added to the variance in every normalization.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting zero-sized dimensions,
    /// length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(CurateError::Dimension(format!(
                "shape {shape:?} must be non-empty with positive sizes"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CurateError::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(CurateError::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(CurateError::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "add")?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "mul")?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CurateError::Dimension(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(CurateError::Dimension(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Gradients of a scalar objective with respect to an op's input and its
/// named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub input_grad: Tensor,
    pub param_grads: BTreeMap<String, Tensor>,
}

impl GradPair {
    pub fn input_only(input_grad: Tensor) -> Self {
        GradPair {
            input_grad,
            param_grads: BTreeMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_grads.get(name)
    }

    fn with(mut self, name: &str, grad: Tensor) -> Self {
        self.param_grads.insert(name.to_string(), grad);
        self
    }
}

// ---------------------------------------------------------------------------
// matmul

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(CurateError::Dimension(format!(
            "matmul inner dimensions {k} and {k2} disagree"
        )));
    }
    Ok(Tensor::from_parts(vec![m, n], matmul_raw(&a.data, &b.data, m, k, n)))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ[k×m] · b[m×n]` without materializing the transpose.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Gradient transform for [`matmul`]: `input_grad` is dL/da, param `"rhs"` is dL/db.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<GradPair> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    if b.shape[0] != k || grad_out.shape != [m, n] {
        return Err(CurateError::Dimension(format!(
            "matmul_backward: a {:?}, b {:?}, grad {:?}",
            a.shape, b.shape, grad_out.shape
        )));
    }
    let da = matmul_nt_raw(&grad_out.data, &b.data, m, n, k);
    let db = matmul_tn_raw(&a.data, &grad_out.data, m, k, n);
    Ok(GradPair::input_only(Tensor::from_parts(vec![m, k], da))
        .with("rhs", Tensor::from_parts(vec![k, n], db)))
}

// ---------------------------------------------------------------------------
// conv2d

/// How out-of-bounds taps are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zeros,
    /// Out-of-bounds taps read the nearest edge pixel.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize, pad_mode: PadMode) -> Self {
        ConvGeometry {
            stride,
            pad,
            pad_mode,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(CurateError::Config("conv stride must be positive".into()));
        }
        let padded = input + 2 * self.pad;
        if padded < kernel {
            return Err(CurateError::Dimension(format!(
                "kernel {kernel} larger than padded input {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Maps a padded coordinate back to an input coordinate, or `None` for a zero tap.
    #[inline]
    fn source(&self, padded: isize, size: usize) -> Option<usize> {
        if padded >= 0 && (padded as usize) < size {
            return Some(padded as usize);
        }
        match self.pad_mode {
            PadMode::Zeros => None,
            PadMode::Replicate => Some(padded.clamp(0, size as isize - 1) as usize),
        }
    }
}

struct ConvDims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, geom: &ConvGeometry) -> Result<ConvDims> {
    input.expect_rank(4, "conv2d input")?;
    kernel.expect_rank(4, "conv2d kernel")?;
    let (b, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (o, kc, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    if kc != c {
        return Err(CurateError::Dimension(format!(
            "conv2d kernel expects {kc} input channels, input has {c}"
        )));
    }
    let oh = geom.output_size(h, kh)?;
    let ow = geom.output_size(w, kw)?;
    Ok(ConvDims {
        b,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Cross-correlation with zero padding.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    conv2d_with(input, kernel, bias, ConvGeometry::new(stride, pad, PadMode::Zeros))
}

pub fn conv2d_with(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let d = conv_dims(input, kernel, &geom)?;
    if bias.shape != [d.o] {
        return Err(CurateError::Dimension(format!(
            "conv2d bias shape {:?}, expected [{}]",
            bias.shape, d.o
        )));
    }
    let mut out = vec![0.0; d.b * d.o * d.oh * d.ow];
    for bi in 0..d.b {
        for oc in 0..d.o {
            let base = (bi * d.o + oc) * d.oh * d.ow;
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = bias.data[oc];
                    for ic in 0..d.c {
                        for ky in 0..d.kh {
                            let py = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            let Some(iy) = geom.source(py, d.h) else {
                                continue;
                            };
                            for kx in 0..d.kw {
                                let px = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                let Some(ix) = geom.source(px, d.w) else {
                                    continue;
                                };
                                acc += input.data[((bi * d.c + ic) * d.h + iy) * d.w + ix]
                                    * kernel.data[((oc * d.c + ic) * d.kh + ky) * d.kw + kx];
                            }
                        }
                    }
                    out[base + oy * d.ow + ox] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.b, d.o, d.oh, d.ow], out))
}

/// Gradient transform for [`conv2d_with`]; params `"kernel"` and `"bias"`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    geom: ConvGeometry,
    grad_out: &Tensor,
) -> Result<GradPair> {
    let d = conv_dims(input, kernel, &geom)?;
    if grad_out.shape != [d.b, d.o, d.oh, d.ow] {
        return Err(CurateError::Dimension(format!(
            "conv2d_backward grad shape {:?}",
            grad_out.shape
        )));
    }
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; d.o];
    for bi in 0..d.b {
        for oc in 0..d.o {
            let base = (bi * d.o + oc) * d.oh * d.ow;
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let g = grad_out.data[base + oy * d.ow + ox];
                    db[oc] += g;
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..d.c {
                        for ky in 0..d.kh {
                            let py = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            let Some(iy) = geom.source(py, d.h) else {
                                continue;
                            };
                            for kx in 0..d.kw {
                                let px = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                let Some(ix) = geom.source(px, d.w) else {
                                    continue;
                                };
                                let xi = ((bi * d.c + ic) * d.h + iy) * d.w + ix;
                                let ki = ((oc * d.c + ic) * d.kh + ky) * d.kw + kx;
                                dx[xi] += g * kernel.data[ki];
                                dk[ki] += g * input.data[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(GradPair::input_only(Tensor::from_parts(input.shape.clone(), dx))
        .with("kernel", Tensor::from_parts(kernel.shape.clone(), dk))
        .with("bias", Tensor::from_parts(vec![d.o], db)))
}

// ---------------------------------------------------------------------------
// normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Per channel over (B, spatial...). Input is `[B, C, ...]`.
    Batch,
    /// Per sample and channel over spatial positions. Input is `[B, C, ...]`.
    Instance,
    /// Per row over the last axis.
    Layer,
}

/// Reduction layout: which group each element belongs to and which affine
/// parameter it uses.
struct NormLayout {
    groups: usize,
    params: usize,
    group_of: Box<dyn Fn(usize) -> usize>,
    param_of: Box<dyn Fn(usize) -> usize>,
}

fn norm_layout(shape: &[usize], mode: NormMode) -> Result<NormLayout> {
    match mode {
        NormMode::Batch | NormMode::Instance => {
            if shape.len() < 2 {
                return Err(CurateError::Dimension(format!(
                    "{mode:?} norm needs [B, C, ...], got {shape:?}"
                )));
            }
            let b = shape[0];
            let c = shape[1];
            let spatial: usize = shape[2..].iter().product();
            let layout = if mode == NormMode::Batch {
                NormLayout {
                    groups: c,
                    params: c,
                    group_of: Box::new(move |i| (i / spatial) % c),
                    param_of: Box::new(move |i| (i / spatial) % c),
                }
            } else {
                NormLayout {
                    groups: b * c,
                    params: c,
                    group_of: Box::new(move |i| i / spatial),
                    param_of: Box::new(move |i| (i / spatial) % c),
                }
            };
            Ok(layout)
        }
        NormMode::Layer => {
            let f = *shape
                .last()
                .ok_or_else(|| CurateError::Dimension("layer norm on rank-0".into()))?;
            let rows = shape.iter().product::<usize>() / f.max(1);
            Ok(NormLayout {
                groups: rows,
                params: f,
                group_of: Box::new(move |i| i / f),
                param_of: Box::new(move |i| i % f),
            })
        }
    }
}

struct NormStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn norm_stats(input: &Tensor, layout: &NormLayout, eps: f64) -> Result<NormStats> {
    let mut count = vec![0usize; layout.groups];
    let mut sum = vec![0.0; layout.groups];
    for (i, &v) in input.data.iter().enumerate() {
        let g = (layout.group_of)(i);
        count[g] += 1;
        sum[g] += v;
    }
    if count.contains(&0) {
        return Err(CurateError::EmptyInput(
            "normalization group has no elements".into(),
        ));
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    let mut sq = vec![0.0; layout.groups];
    for (i, &v) in input.data.iter().enumerate() {
        let g = (layout.group_of)(i);
        let dv = v - mean[g];
        sq[g] += dv * dv;
    }
    let inv_std = sq
        .iter()
        .zip(&count)
        .map(|(s, &n)| 1.0 / (s / n as f64 + eps).sqrt())
        .collect();
    Ok(NormStats { mean, inv_std })
}

fn check_affine(layout: &NormLayout, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.len() != layout.params || beta.len() != layout.params {
        return Err(CurateError::Dimension(format!(
            "norm affine params need length {}, got gamma {} / beta {}",
            layout.params,
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// `gamma·(x−mean)/sqrt(var+eps)+beta` with per-batch statistics and the biased
/// variance estimator.
pub fn normalize(
    input: &Tensor,
    mode: NormMode,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let layout = norm_layout(&input.shape, mode)?;
    check_affine(&layout, gamma, beta)?;
    let stats = norm_stats(input, &layout, eps)?;
    let out = input
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = (layout.group_of)(i);
            let p = (layout.param_of)(i);
            gamma.data[p] * (v - stats.mean[g]) * stats.inv_std[g] + beta.data[p]
        })
        .collect();
    Ok(Tensor::from_parts(input.shape.clone(), out))
}

/// Per-channel mean and biased variance of a `[B, C, ...]` input.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn channel_stats(input: &Tensor) -> Result<ChannelStats> {
    let layout = norm_layout(&input.shape, NormMode::Batch)?;
    let mean = norm_stats(input, &layout, 0.0)?.mean;
    let per_group = (input.len() / layout.groups) as f64;
    let mut var = vec![0.0; layout.groups];
    for (i, &v) in input.data.iter().enumerate() {
        let g = (layout.group_of)(i);
        var[g] += (v - mean[g]) * (v - mean[g]) / per_group;
    }
    Ok(ChannelStats { mean, var })
}

/// Batch normalization with fixed statistics, as at inference time.
pub fn normalize_frozen(input: &Tensor, stats: &ChannelStats, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let layout = norm_layout(&input.shape, NormMode::Batch)?;
    check_affine(&layout, gamma, beta)?;
    if stats.mean.len() != layout.groups || stats.var.len() != layout.groups {
        return Err(CurateError::Dimension(format!(
            "{} channels but statistics for {}",
            layout.groups,
            stats.mean.len()
        )));
    }
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let out = input
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (layout.group_of)(i);
            gamma.data[c] * (v - stats.mean[c]) * inv_std[c] + beta.data[c]
        })
        .collect();
    Ok(Tensor::from_parts(input.shape.clone(), out))
}

/// Gradient transform for [`normalize`]; params `"gamma"` and `"beta"`.
pub fn normalize_backward(
    input: &Tensor,
    mode: NormMode,
    gamma: &Tensor,
    eps: f64,
    grad_out: &Tensor,
) -> Result<GradPair> {
    input.expect_same_shape(grad_out, "normalize_backward")?;
    let layout = norm_layout(&input.shape, mode)?;
    if gamma.len() != layout.params {
        return Err(CurateError::Dimension("normalize_backward gamma length".into()));
    }
    let stats = norm_stats(input, &layout, eps)?;
    let n = input.len();
    let xhat: Vec<f64> = (0..n)
        .map(|i| {
            let g = (layout.group_of)(i);
            (input.data[i] - stats.mean[g]) * stats.inv_std[g]
        })
        .collect();
    let mut dgamma = vec![0.0; layout.params];
    let mut dbeta = vec![0.0; layout.params];
    let mut count = vec![0usize; layout.groups];
    let mut mean_dxhat = vec![0.0; layout.groups];
    let mut mean_dxhat_xhat = vec![0.0; layout.groups];
    let mut dxhat = vec![0.0; n];
    for i in 0..n {
        let g = (layout.group_of)(i);
        let p = (layout.param_of)(i);
        let dy = grad_out.data[i];
        dgamma[p] += dy * xhat[i];
        dbeta[p] += dy;
        dxhat[i] = dy * gamma.data[p];
        count[g] += 1;
        mean_dxhat[g] += dxhat[i];
        mean_dxhat_xhat[g] += dxhat[i] * xhat[i];
    }
    for g in 0..layout.groups {
        mean_dxhat[g] /= count[g] as f64;
        mean_dxhat_xhat[g] /= count[g] as f64;
    }
    let dx = (0..n)
        .map(|i| {
            let g = (layout.group_of)(i);
            stats.inv_std[g] * (dxhat[i] - mean_dxhat[g] - xhat[i] * mean_dxhat_xhat[g])
        })
        .collect();
    Ok(GradPair::input_only(Tensor::from_parts(input.shape.clone(), dx))
        .with("gamma", Tensor::from_parts(vec![layout.params], dgamma))
        .with("beta", Tensor::from_parts(vec![layout.params], dbeta)))
}

// ---------------------------------------------------------------------------
// activations

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Gelu => input.map(gelu),
    }
}

/// Gradient transform for [`activation`]. The relu derivative at exactly 0 is taken as 0.
pub fn activation_backward(input: &Tensor, kind: Activation, grad_out: &Tensor) -> Result<Tensor> {
    input.expect_same_shape(grad_out, "activation_backward")?;
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| match kind {
            Activation::Relu => {
                if x > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            Activation::Gelu => g * gelu_grad(x),
        })
        .collect();
    Ok(Tensor::from_parts(input.shape.clone(), data))
}

// ---------------------------------------------------------------------------
// softmax

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(CurateError::Dimension(format!(
            "softmax axis {axis} out of range for {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(&input.shape, axis)?;
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len)
                .map(|k| input.data[idx(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (input.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape.clone(), out))
}

/// Gradient transform for [`softmax`], expressed through its output `p`:
/// `dx = p ⊙ (dy − Σ dy⊙p)` along the axis.
pub fn softmax_backward(output: &Tensor, axis: usize, grad_out: &Tensor) -> Result<Tensor> {
    output.expect_same_shape(grad_out, "softmax_backward")?;
    let (outer, len, inner) = axis_layout(&output.shape, axis)?;
    let mut dx = vec![0.0; output.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len)
                .map(|k| output.data[idx(k)] * grad_out.data[idx(k)])
                .sum();
            for k in 0..len {
                dx[idx(k)] = output.data[idx(k)] * (grad_out.data[idx(k)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(output.shape.clone(), dx))
}

// ---------------------------------------------------------------------------
// finite differences

/// Central-difference gradient `(f(x+h·e)−f(x−h·e))/(2h)` for every coordinate.
pub fn fd_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64 + Sync,
{
    fd_gradient_at(f, x, h, &(0..x.len()).collect::<Vec<_>>())
        .map(|vals| Tensor::from_parts(x.shape.clone(), vals))
}

/// Central differences at a subset of flat coordinates, in the given order.
pub fn fd_gradient_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> f64 + Sync,
{
    if h.is_nan() || h <= 0.0 {
        return Err(CurateError::Range(format!("finite-difference step {h} must be > 0")));
    }
    if let Some(&bad) = coords.iter().find(|&&c| c >= x.len()) {
        return Err(CurateError::Range(format!("coordinate {bad} out of range")));
    }
    Ok(coords
        .par_iter()
        .map(|&i| {
            let mut probe = x.clone();
            probe.data[i] = x.data[i] + h;
            let up = f(&probe);
            probe.data[i] = x.data[i] - h;
            let down = f(&probe);
            (up - down) / (2.0 * h)
        })
        .collect())
}

/// `|a − n| / max(|a|, |n|, floor)` maximized over paired entries. NaN
/// anywhere yields NaN.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, |m, e| if e.is_nan() || e > m { e } else { m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Weighted sum used to turn tensor outputs into a scalar objective.
    fn weighted(out: &Tensor, w: &Tensor) -> f64 {
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    const FLOOR: f64 = 1e-6;

    #[test]
    fn frozen_norm_with_own_stats_matches_batch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random(&[3, 2, 4, 5], &mut rng);
        let gamma = random(&[2], &mut rng);
        let beta = random(&[2], &mut rng);
        let stats = channel_stats(&x).unwrap();
        let live = normalize(&x, NormMode::Batch, &gamma, &beta, 1e-5).unwrap();
        let frozen = normalize_frozen(&x, &stats, &gamma, &beta, 1e-5).unwrap();
        assert!(max_relative_error(live.data(), frozen.data(), 1e-12) < 1e-12);
        // Frozen statistics do not follow a shifted batch.
        let shifted = x.map(|v| v + 1.0);
        let out = normalize_frozen(&shifted, &stats, &gamma, &beta, 1e-5).unwrap();
        assert!((out.data()[0] - frozen.data()[0] - gamma.data()[0] / (stats.var[0] + 1e-5).sqrt()).abs() < 1e-12);
        assert!(normalize_frozen(&random(&[1, 3, 2], &mut rng), &stats, &gamma, &beta, 1e-5).is_err());
    }

    #[test]
    fn tensor_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(CurateError::NonFinite { index: 1 })
        ));
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let m = Tensor::from_fn(&[3, 2], |i| i as f64 + 0.5);
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);

        let z = Tensor::zeros(&[2, 3]);
        assert!(matmul(&z, &m).unwrap().data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            matmul(&a, &m),
            Err(CurateError::Dimension(_))
        ));
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[2, 2], &mut rng);
        let b = random(&[2, 2], &mut rng);
        let ones = Tensor::filled(&[2, 2], 1.0);
        let g = matmul_backward(&a, &b, &ones).unwrap();
        let fa = fd_gradient(|t| matmul(t, &b).unwrap().sum(), &a, 1e-4).unwrap();
        let fb = fd_gradient(|t| matmul(&a, t).unwrap().sum(), &b, 1e-4).unwrap();
        for (x, y) in g.input_grad.data().iter().zip(fa.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in g.param("rhs").unwrap().data().iter().zip(fb.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_examples() {
        let ones = Tensor::filled(&[1, 1, 4, 4], 1.0);
        let k = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let b0 = Tensor::zeros(&[1]);
        let out = conv2d(&ones, &k, &b0, 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));

        // Delta kernel crops the input.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let mut delta = Tensor::zeros(&[1, 1, 2, 2]);
        delta.data_mut()[0] = 1.0;
        let crop = conv2d(&x, &delta, &b0, 1, 0).unwrap();
        assert_eq!(crop.shape(), &[1, 1, 3, 3]);
        for y in 0..3 {
            for xx in 0..3 {
                assert_eq!(crop.data()[y * 3 + xx], x.data()[y * 4 + xx]);
            }
        }

        let zero = Tensor::zeros(&[1, 1, 4, 4]);
        let kr = random(&[2, 1, 3, 3], &mut rng);
        let out = conv2d(&zero, &kr, &Tensor::zeros(&[2]), 1, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let big = Tensor::filled(&[1, 1, 5, 5], 1.0);
        assert!(matches!(
            conv2d(&ones, &big, &b0, 1, 0),
            Err(CurateError::Dimension(_))
        ));
    }

    #[test]
    fn conv2d_partition_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 6, 6], &mut rng);
        let k = Tensor::filled(&[4, 3, 3, 3], 1.0);
        let bias = Tensor::filled(&[4], 0.25);
        let out = conv2d(&x, &k, &bias, 3, 0).unwrap();
        let (b, o, oh, ow) = (2.0, 4.0, 2.0, 2.0);
        // Each output channel sees every input value exactly once.
        let expected = o * x.sum() + b * o * oh * ow * 0.25;
        assert!((out.sum() - expected).abs() < 1e-10);
    }

    #[test]
    fn conv2d_gradient_matches_fd() {
        for mode in [PadMode::Zeros, PadMode::Replicate] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x = random(&[2, 2, 5, 5], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let bias = random(&[3], &mut rng);
            let geom = ConvGeometry::new(2, 1, mode);
            let out = conv2d_with(&x, &k, &bias, geom).unwrap();
            let w = random(out.shape(), &mut rng);
            let g = conv2d_backward(&x, &k, geom, &w).unwrap();
            let fx = fd_gradient(|t| weighted(&conv2d_with(t, &k, &bias, geom).unwrap(), &w), &x, 1e-4)
                .unwrap();
            let fk = fd_gradient(|t| weighted(&conv2d_with(&x, t, &bias, geom).unwrap(), &w), &k, 1e-4)
                .unwrap();
            let fb = fd_gradient(|t| weighted(&conv2d_with(&x, &k, t, geom).unwrap(), &w), &bias, 1e-4)
                .unwrap();
            assert!(max_relative_error(g.input_grad.data(), fx.data(), FLOOR) <= 1e-5);
            assert!(max_relative_error(g.param("kernel").unwrap().data(), fk.data(), FLOOR) <= 1e-5);
            assert!(max_relative_error(g.param("bias").unwrap().data(), fb.data(), FLOOR) <= 1e-5);
        }
    }

    #[test]
    fn instance_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 4, 4], &mut rng).map(|v| 3.0 * v + 1.0);
        let out = normalize(&x, NormMode::Instance, &Tensor::filled(&[3], 1.0), &Tensor::zeros(&[3]), 1e-12)
            .unwrap();
        for group in out.data().chunks(16) {
            let mean = group.iter().sum::<f64>() / 16.0;
            let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_input_normalizes_to_beta() {
        let x = Tensor::filled(&[2, 2, 3, 3], 7.5);
        for mode in [NormMode::Batch, NormMode::Instance] {
            let out = normalize(&x, mode, &Tensor::filled(&[2], 1.0), &Tensor::filled(&[2], 5.0), DEFAULT_EPS)
                .unwrap();
            assert!(out.data().iter().all(|&v| v == 5.0));
        }
    }

    #[test]
    fn batch_equals_instance_for_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[1, 2, 3, 3], &mut rng);
        let g = random(&[2], &mut rng);
        let b = random(&[2], &mut rng);
        let bn = normalize(&x, NormMode::Batch, &g, &b, DEFAULT_EPS).unwrap();
        let inn = normalize(&x, NormMode::Instance, &g, &b, DEFAULT_EPS).unwrap();
        assert_eq!(bn, inn);
    }

    #[test]
    fn normalize_rejects_bad_affine() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            normalize(&x, NormMode::Batch, &Tensor::zeros(&[3]), &Tensor::zeros(&[2]), 1e-5),
            Err(CurateError::Dimension(_))
        ));
        assert!(normalize(&Tensor::zeros(&[4]), NormMode::Instance, &Tensor::zeros(&[1]), &Tensor::zeros(&[1]), 1e-5)
            .is_err());
    }

    #[test]
    fn normalize_gradients_match_fd() {
        let cases: [(NormMode, &[usize], usize); 3] = [
            (NormMode::Batch, &[3, 2, 3, 3], 2),
            (NormMode::Instance, &[2, 3, 3, 3], 3),
            (NormMode::Layer, &[4, 6], 6),
        ];
        for (mode, shape, params) in cases {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = random(shape, &mut rng);
            let gamma = random(&[params], &mut rng);
            let beta = random(&[params], &mut rng);
            let w = random(shape, &mut rng);
            let grads = normalize_backward(&x, mode, &gamma, DEFAULT_EPS, &w).unwrap();
            let fx = fd_gradient(|t| weighted(&normalize(t, mode, &gamma, &beta, DEFAULT_EPS).unwrap(), &w), &x, 1e-4)
                .unwrap();
            let fg = fd_gradient(|t| weighted(&normalize(&x, mode, t, &beta, DEFAULT_EPS).unwrap(), &w), &gamma, 1e-4)
                .unwrap();
            let fbeta = fd_gradient(|t| weighted(&normalize(&x, mode, &gamma, t, DEFAULT_EPS).unwrap(), &w), &beta, 1e-4)
                .unwrap();
            assert!(max_relative_error(grads.input_grad.data(), fx.data(), FLOOR) <= 1e-5, "{mode:?}");
            assert!(max_relative_error(grads.param("gamma").unwrap().data(), fg.data(), FLOOR) <= 1e-5);
            assert!(max_relative_error(grads.param("beta").unwrap().data(), fbeta.data(), FLOOR) <= 1e-5);
        }
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        let z = Tensor::zeros(&[1]);
        assert_eq!(activation(&z, Activation::Gelu).data(), &[0.0]);
        let g = activation_backward(
            &Tensor::new(vec![2], vec![2.0, -1.0]).unwrap(),
            Activation::Relu,
            &Tensor::filled(&[2], 1.0),
        )
        .unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn activation_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Keep relu inputs away from the kink.
        let x = Tensor::from_fn(&[50], |i| {
            let v: f64 = rng.random_range(0.05..2.0);
            if i % 2 == 0 { v } else { -v }
        });
        let w = random(&[50], &mut rng);
        for kind in [Activation::Relu, Activation::Gelu] {
            let g = activation_backward(&x, kind, &w).unwrap();
            let f = fd_gradient(|t| weighted(&activation(t, kind), &w), &x, 1e-4).unwrap();
            assert!(max_relative_error(g.data(), f.data(), FLOOR) <= 1e-5, "{kind:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        let u = Tensor::filled(&[4], 0.3);
        let s = softmax(&u, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random(&[3, 5], &mut rng);
        let shifted = r.map(|v| v + 17.0);
        let a = softmax(&r, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-14);
        }
        assert!(softmax(&r, 2).is_err());
    }

    #[test]
    fn softmax_rows_positive_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[3, 4, 5], &mut rng).map(|v| 20.0 * v);
        for axis in 0..3 {
            let s = softmax(&x, axis).unwrap();
            assert!(s.data().iter().all(|&v| v > 0.0));
            let (outer, len, inner) = axis_layout(x.shape(), axis).unwrap();
            for o in 0..outer {
                for i in 0..inner {
                    let total: f64 = (0..len).map(|k| s.data()[(o * len + k) * inner + i]).sum();
                    assert!((total - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[3, 4], &mut rng);
        for axis in 0..2 {
            let s = softmax(&x, axis).unwrap();
            let g = softmax_backward(&s, axis, &w).unwrap();
            let f = fd_gradient(|t| weighted(&softmax(t, axis).unwrap(), &w), &x, 1e-4).unwrap();
            assert!(max_relative_error(g.data(), f.data(), FLOOR) <= 1e-5);
        }
    }

    #[test]
    fn fd_gradient_examples() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = fd_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let y = Tensor::from_fn(&[5], |i| i as f64);
        let g = fd_gradient(|t| t.sum(), &y, 1e-3).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-10));

        assert!(matches!(
            fd_gradient(|t| t.sum(), &y, 0.0),
            Err(CurateError::Range(_))
        ));
    }
}
