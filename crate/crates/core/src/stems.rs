//! Patch-embedding front-ends: the patchify stem, the convolution stem and the
//! IBN-based convolution stem (ICS).
//!
//! All three map `B×3×H×W` images to `B×T×D` token sequences with
//! `T = (H/p)·(W/p)`. The convolution stems stack `3×3` stride-2 convolutions
//! (each followed by normalization and relu) over a doubling channel ladder and
//! finish with a `1×1` projection to `D`. In the ICS, the first `in_layers`
//! blocks normalize half of their channels per instance and the other half over
//! the batch.
//!
//! Convolutions in the stems pad by replicating edge pixels, so an additive
//! per-image constant shifts every receptive field equally and the instance
//! half removes it exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CurateError, Result};
use crate::tensor::{
    activation, activation_backward, channel_stats, conv2d_backward, conv2d_with, normalize,
    normalize_backward, normalize_frozen, Activation, ChannelStats, ConvGeometry, NormMode, PadMode,
    Tensor, DEFAULT_EPS,
};

/// Which channel half of a split block is instance-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelHalf {
    Lower,
    Upper,
}

/// IBNNet-a convention: instance norm on the lower channel indices.
pub const INSTANCE_HALF: ChannelHalf = ChannelHalf::Lower;

const STEM_KERNEL: usize = 3;
const STEM_STRIDE: usize = 2;
const STEM_PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemVariant {
    Patchify,
    Conv,
    Ics,
}

impl std::str::FromStr for StemVariant {
    type Err = CurateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patchify" => Ok(StemVariant::Patchify),
            "conv" => Ok(StemVariant::Conv),
            "ics" => Ok(StemVariant::Ics),
            other => Err(CurateError::Config(format!("unknown stem variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub variant: StemVariant,
    pub patch_stride: usize,
    pub embed_dim: usize,
    /// Output channels of each stride-2 convolution (convolution stems only).
    pub channel_ladder: Vec<usize>,
    /// Leading blocks whose normalization is split half-IN/half-BN (ICS only).
    pub in_layers: usize,
    pub eps: f64,
    pub pad_mode: PadMode,
}

impl StemConfig {
    pub fn patchify(patch_stride: usize, embed_dim: usize) -> Self {
        StemConfig {
            variant: StemVariant::Patchify,
            patch_stride,
            embed_dim,
            channel_ladder: Vec::new(),
            in_layers: 0,
            eps: DEFAULT_EPS,
            pad_mode: PadMode::Replicate,
        }
    }

    pub fn conv(patch_stride: usize, embed_dim: usize) -> Result<Self> {
        Ok(StemConfig {
            variant: StemVariant::Conv,
            channel_ladder: default_ladder(patch_stride, embed_dim)?,
            ..Self::patchify(patch_stride, embed_dim)
        })
    }

    pub fn ics(patch_stride: usize, embed_dim: usize) -> Result<Self> {
        Ok(StemConfig {
            variant: StemVariant::Ics,
            in_layers: 2,
            ..Self::conv(patch_stride, embed_dim)?
        })
    }

    pub fn for_variant(variant: StemVariant, patch_stride: usize, embed_dim: usize) -> Result<Self> {
        match variant {
            StemVariant::Patchify => Ok(Self::patchify(patch_stride, embed_dim)),
            StemVariant::Conv => Self::conv(patch_stride, embed_dim),
            StemVariant::Ics => Self::ics(patch_stride, embed_dim),
        }
    }

    /// Number of split blocks actually used by the architecture.
    pub fn split_layers(&self) -> usize {
        match self.variant {
            StemVariant::Ics => self.in_layers,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_stride == 0 || self.embed_dim == 0 {
            return Err(CurateError::Config(
                "patch stride and embed dim must be positive".into(),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(CurateError::Config("eps must be positive".into()));
        }
        if self.variant == StemVariant::Patchify {
            return Ok(());
        }
        let ladder = &self.channel_ladder;
        if ladder.is_empty() || ladder.contains(&0) {
            return Err(CurateError::Config("channel ladder must be non-empty and positive".into()));
        }
        if ladder.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CurateError::Config(format!(
                "channel ladder {ladder:?} must be strictly increasing"
            )));
        }
        let total_stride = STEM_STRIDE.checked_pow(ladder.len() as u32);
        if total_stride != Some(self.patch_stride) {
            return Err(CurateError::Config(format!(
                "{} stride-{STEM_STRIDE} layers do not reduce by patch stride {}",
                ladder.len(),
                self.patch_stride
            )));
        }
        if self.in_layers > ladder.len() {
            return Err(CurateError::Config(format!(
                "in_layers {} exceeds {} convolution layers",
                self.in_layers,
                ladder.len()
            )));
        }
        for (i, &c) in ladder.iter().take(self.split_layers()).enumerate() {
            if c % 2 != 0 {
                return Err(CurateError::Config(format!(
                    "layer {i} has {c} channels, cannot split in half"
                )));
            }
        }
        Ok(())
    }

    /// Token grid `(H/p, W/p)` for an input size.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.patch_stride;
        if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) || height == 0 || width == 0 {
            return Err(CurateError::Dimension(format!(
                "image {height}×{width} not divisible by patch stride {p}"
            )));
        }
        Ok((height / p, width / p))
    }
}

/// `(D/2^(L−1), …, D/2, D)` for `L = log2(p)` stride-2 layers, i.e.
/// `(D/8, D/4, D/2, D)` for `p = 16`.
pub fn default_ladder(patch_stride: usize, embed_dim: usize) -> Result<Vec<usize>> {
    if !patch_stride.is_power_of_two() || patch_stride < 2 {
        return Err(CurateError::Config(format!(
            "convolution stems need a power-of-two patch stride ≥ 2, got {patch_stride}"
        )));
    }
    let layers = patch_stride.trailing_zeros() as usize;
    let top = 1usize << (layers - 1);
    if !embed_dim.is_multiple_of(top) {
        return Err(CurateError::Config(format!(
            "embed dim {embed_dim} not divisible by {top}"
        )));
    }
    Ok((0..layers).map(|i| embed_dim / (top >> i)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockNorm {
    Batch {
        gamma: Tensor,
        beta: Tensor,
    },
    Split {
        in_gamma: Tensor,
        in_beta: Tensor,
        bn_gamma: Tensor,
        bn_beta: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub norm: BlockNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemParams {
    pub blocks: Vec<ConvBlockParams>,
    pub proj_kernel: Tensor,
    pub proj_bias: Tensor,
}

fn uniform_kernel(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl StemParams {
    /// Kernels uniform in `±1/√fan_in`, zero biases, `gamma = 1`, `beta = 0`.
    pub fn init(config: &StemConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        if config.variant == StemVariant::Patchify {
            let p = config.patch_stride;
            return Ok(StemParams {
                blocks: Vec::new(),
                proj_kernel: uniform_kernel(&[d, 3, p, p], rng),
                proj_bias: Tensor::zeros(&[d]),
            });
        }
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        for (i, &out_ch) in config.channel_ladder.iter().enumerate() {
            let kernel = uniform_kernel(&[out_ch, in_ch, STEM_KERNEL, STEM_KERNEL], rng);
            let norm = if i < config.split_layers() {
                let half = out_ch / 2;
                BlockNorm::Split {
                    in_gamma: Tensor::filled(&[half], 1.0),
                    in_beta: Tensor::zeros(&[half]),
                    bn_gamma: Tensor::filled(&[out_ch - half], 1.0),
                    bn_beta: Tensor::zeros(&[out_ch - half]),
                }
            } else {
                BlockNorm::Batch {
                    gamma: Tensor::filled(&[out_ch], 1.0),
                    beta: Tensor::zeros(&[out_ch]),
                }
            };
            blocks.push(ConvBlockParams {
                kernel,
                bias: Tensor::zeros(&[out_ch]),
                norm,
            });
            in_ch = out_ch;
        }
        Ok(StemParams {
            blocks,
            proj_kernel: uniform_kernel(&[d, in_ch, 1, 1], rng),
            proj_bias: Tensor::zeros(&[d]),
        })
    }

    /// Same structure, every value zero. Used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.named_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("stem.block{i}.kernel"), &b.kernel));
            out.push((format!("stem.block{i}.bias"), &b.bias));
            match &b.norm {
                BlockNorm::Batch { gamma, beta } => {
                    out.push((format!("stem.block{i}.gamma"), gamma));
                    out.push((format!("stem.block{i}.beta"), beta));
                }
                BlockNorm::Split {
                    in_gamma,
                    in_beta,
                    bn_gamma,
                    bn_beta,
                } => {
                    out.push((format!("stem.block{i}.in_gamma"), in_gamma));
                    out.push((format!("stem.block{i}.in_beta"), in_beta));
                    out.push((format!("stem.block{i}.bn_gamma"), bn_gamma));
                    out.push((format!("stem.block{i}.bn_beta"), bn_beta));
                }
            }
        }
        out.push(("stem.proj.kernel".into(), &self.proj_kernel));
        out.push(("stem.proj.bias".into(), &self.proj_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("stem.block{i}.kernel"), &mut b.kernel));
            out.push((format!("stem.block{i}.bias"), &mut b.bias));
            match &mut b.norm {
                BlockNorm::Batch { gamma, beta } => {
                    out.push((format!("stem.block{i}.gamma"), gamma));
                    out.push((format!("stem.block{i}.beta"), beta));
                }
                BlockNorm::Split {
                    in_gamma,
                    in_beta,
                    bn_gamma,
                    bn_beta,
                } => {
                    out.push((format!("stem.block{i}.in_gamma"), in_gamma));
                    out.push((format!("stem.block{i}.in_beta"), in_beta));
                    out.push((format!("stem.block{i}.bn_gamma"), bn_gamma));
                    out.push((format!("stem.block{i}.bn_beta"), bn_beta));
                }
            }
        }
        out.push(("stem.proj.kernel".into(), &mut self.proj_kernel));
        out.push(("stem.proj.bias".into(), &mut self.proj_bias));
        out
    }
}

/// Forward values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StemTrace {
    block_inputs: Vec<Tensor>,
    conv_outs: Vec<Tensor>,
    /// Post-norm, pre-relu activations of each block.
    pub norm_outs: Vec<Tensor>,
    proj_input: Tensor,
    grid: (usize, usize),
}

fn block_geometry(config: &StemConfig) -> ConvGeometry {
    ConvGeometry::new(STEM_STRIDE, STEM_PAD, config.pad_mode)
}

fn proj_geometry(config: &StemConfig) -> ConvGeometry {
    match config.variant {
        StemVariant::Patchify => ConvGeometry::new(config.patch_stride, 0, PadMode::Zeros),
        _ => ConvGeometry::new(1, 0, PadMode::Zeros),
    }
}

/// Splits `[B, C, ...]` along channels at `at`.
pub(crate) fn split_channels(t: &Tensor, at: usize) -> (Tensor, Tensor) {
    let shape = t.shape();
    let (b, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let mut lo = Vec::with_capacity(b * at * spatial);
    let mut hi = Vec::with_capacity(b * (c - at) * spatial);
    for bi in 0..b {
        let row = &t.data()[bi * c * spatial..(bi + 1) * c * spatial];
        lo.extend_from_slice(&row[..at * spatial]);
        hi.extend_from_slice(&row[at * spatial..]);
    }
    let mut lo_shape = shape.to_vec();
    lo_shape[1] = at;
    let mut hi_shape = shape.to_vec();
    hi_shape[1] = c - at;
    (Tensor::from_parts(lo_shape, lo), Tensor::from_parts(hi_shape, hi))
}

pub(crate) fn concat_channels(lo: &Tensor, hi: &Tensor) -> Tensor {
    let (b, cl, ch) = (lo.shape()[0], lo.shape()[1], hi.shape()[1]);
    let spatial: usize = lo.shape()[2..].iter().product();
    let mut data = Vec::with_capacity(lo.len() + hi.len());
    for bi in 0..b {
        data.extend_from_slice(&lo.data()[bi * cl * spatial..(bi + 1) * cl * spatial]);
        data.extend_from_slice(&hi.data()[bi * ch * spatial..(bi + 1) * ch * spatial]);
    }
    let mut shape = lo.shape().to_vec();
    shape[1] = cl + ch;
    Tensor::from_parts(shape, data)
}

/// Half sizes `(instance, batch)` for a split block with `c` channels.
fn split_sizes(c: usize) -> (usize, usize) {
    (c / 2, c - c / 2)
}

fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, frozen: Option<&ChannelStats>) -> Result<Tensor> {
    match frozen {
        Some(stats) => normalize_frozen(x, stats, gamma, beta, eps),
        None => normalize(x, NormMode::Batch, gamma, beta, eps),
    }
}

/// Channels of a block that batch normalization sees.
fn batch_part(conv_out: &Tensor, norm: &BlockNorm) -> Tensor {
    match norm {
        BlockNorm::Batch { .. } => conv_out.clone(),
        BlockNorm::Split { .. } => {
            let c = conv_out.shape()[1];
            let (n_in, _) = split_sizes(c);
            match INSTANCE_HALF {
                ChannelHalf::Lower => split_channels(conv_out, n_in).1,
                ChannelHalf::Upper => split_channels(conv_out, c - n_in).0,
            }
        }
    }
}

fn norm_block(conv_out: &Tensor, norm: &BlockNorm, eps: f64, frozen: Option<&ChannelStats>) -> Result<Tensor> {
    match norm {
        BlockNorm::Batch { gamma, beta } => batch_norm(conv_out, gamma, beta, eps, frozen),
        BlockNorm::Split {
            in_gamma,
            in_beta,
            bn_gamma,
            bn_beta,
        } => {
            let c = conv_out.shape()[1];
            let (n_in, _) = split_sizes(c);
            match INSTANCE_HALF {
                ChannelHalf::Lower => {
                    let (lo, hi) = split_channels(conv_out, n_in);
                    let lo = normalize(&lo, NormMode::Instance, in_gamma, in_beta, eps)?;
                    let hi = batch_norm(&hi, bn_gamma, bn_beta, eps, frozen)?;
                    Ok(concat_channels(&lo, &hi))
                }
                ChannelHalf::Upper => {
                    let (lo, hi) = split_channels(conv_out, c - n_in);
                    let lo = batch_norm(&lo, bn_gamma, bn_beta, eps, frozen)?;
                    let hi = normalize(&hi, NormMode::Instance, in_gamma, in_beta, eps)?;
                    Ok(concat_channels(&lo, &hi))
                }
            }
        }
    }
}

/// Returns the input gradient and writes affine gradients into `grads`.
fn norm_block_backward(
    conv_out: &Tensor,
    norm: &BlockNorm,
    eps: f64,
    grad: &Tensor,
    grads: &mut BlockNorm,
) -> Result<Tensor> {
    match (norm, grads) {
        (BlockNorm::Batch { gamma, .. }, BlockNorm::Batch { gamma: dg, beta: db }) => {
            let g = normalize_backward(conv_out, NormMode::Batch, gamma, eps, grad)?;
            dg.add_assign(&g.param_grads["gamma"])?;
            db.add_assign(&g.param_grads["beta"])?;
            Ok(g.input_grad)
        }
        (
            BlockNorm::Split {
                in_gamma,
                bn_gamma,
                ..
            },
            BlockNorm::Split {
                in_gamma: dig,
                in_beta: dib,
                bn_gamma: dbg,
                bn_beta: dbb,
            },
        ) => {
            let c = conv_out.shape()[1];
            let (n_in, _) = split_sizes(c);
            let at = match INSTANCE_HALF {
                ChannelHalf::Lower => n_in,
                ChannelHalf::Upper => c - n_in,
            };
            let (x_lo, x_hi) = split_channels(conv_out, at);
            let (g_lo, g_hi) = split_channels(grad, at);
            let (in_x, in_g, bn_x, bn_g) = match INSTANCE_HALF {
                ChannelHalf::Lower => (&x_lo, &g_lo, &x_hi, &g_hi),
                ChannelHalf::Upper => (&x_hi, &g_hi, &x_lo, &g_lo),
            };
            let gi = normalize_backward(in_x, NormMode::Instance, in_gamma, eps, in_g)?;
            let gb = normalize_backward(bn_x, NormMode::Batch, bn_gamma, eps, bn_g)?;
            dig.add_assign(&gi.param_grads["gamma"])?;
            dib.add_assign(&gi.param_grads["beta"])?;
            dbg.add_assign(&gb.param_grads["gamma"])?;
            dbb.add_assign(&gb.param_grads["beta"])?;
            Ok(match INSTANCE_HALF {
                ChannelHalf::Lower => concat_channels(&gi.input_grad, &gb.input_grad),
                ChannelHalf::Upper => concat_channels(&gb.input_grad, &gi.input_grad),
            })
        }
        _ => Err(CurateError::Config("gradient buffer does not match block layout".into())),
    }
}

fn check_params(config: &StemConfig, params: &StemParams, split_layers: usize) -> Result<()> {
    let expected_blocks = match config.variant {
        StemVariant::Patchify => 0,
        _ => config.channel_ladder.len(),
    };
    if params.blocks.len() != expected_blocks {
        return Err(CurateError::Config(format!(
            "stem params have {} blocks, config needs {expected_blocks}",
            params.blocks.len()
        )));
    }
    for (i, b) in params.blocks.iter().enumerate() {
        let split = matches!(b.norm, BlockNorm::Split { .. });
        if split != (i < split_layers) {
            return Err(CurateError::Config(format!(
                "block {i} normalization does not match in_layers {split_layers}"
            )));
        }
    }
    Ok(())
}

fn tokens_from_map(map: &Tensor) -> Tensor {
    let (b, d, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2], map.shape()[3]);
    let t = h * w;
    let mut out = vec![0.0; b * t * d];
    for bi in 0..b {
        for di in 0..d {
            for ti in 0..t {
                out[(bi * t + ti) * d + di] = map.data()[(bi * d + di) * t + ti];
            }
        }
    }
    Tensor::from_parts(vec![b, t, d], out)
}

fn map_from_tokens(tokens: &Tensor, grid: (usize, usize)) -> Tensor {
    let (b, t, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let mut out = vec![0.0; b * t * d];
    for bi in 0..b {
        for ti in 0..t {
            for di in 0..d {
                out[(bi * d + di) * t + ti] = tokens.data()[(bi * t + ti) * d + di];
            }
        }
    }
    Tensor::from_parts(vec![b, d, grid.0, grid.1], out)
}

fn check_image(image: &Tensor, config: &StemConfig) -> Result<(usize, usize)> {
    image.expect_rank(4, "stem input")?;
    if image.shape()[1] != 3 {
        return Err(CurateError::Dimension(format!(
            "stem input needs 3 channels, got {}",
            image.shape()[1]
        )));
    }
    config.grid(image.shape()[2], image.shape()[3])
}

fn forward_impl(
    image: &Tensor,
    config: &StemConfig,
    params: &StemParams,
    split_layers: usize,
    frozen: Option<&StemStats>,
) -> Result<(Tensor, StemTrace)> {
    config.validate()?;
    let grid = check_image(image, config)?;
    check_params(config, params, split_layers)?;
    if let Some(stats) = frozen {
        if stats.blocks.len() != params.blocks.len() {
            return Err(CurateError::Config(format!(
                "statistics for {} blocks, stem has {}",
                stats.blocks.len(),
                params.blocks.len()
            )));
        }
    }
    let geom = block_geometry(config);
    let mut trace = StemTrace {
        block_inputs: Vec::new(),
        conv_outs: Vec::new(),
        norm_outs: Vec::new(),
        proj_input: Tensor::zeros(&[1]),
        grid,
    };
    let mut x = image.clone();
    for (i, block) in params.blocks.iter().enumerate() {
        let conv_out = conv2d_with(&x, &block.kernel, &block.bias, geom)?;
        let normed = norm_block(&conv_out, &block.norm, config.eps, frozen.map(|s| &s.blocks[i]))?;
        let act = activation(&normed, Activation::Relu);
        trace.block_inputs.push(x);
        trace.conv_outs.push(conv_out);
        trace.norm_outs.push(normed);
        x = act;
    }
    let proj = conv2d_with(&x, &params.proj_kernel, &params.proj_bias, proj_geometry(config))?;
    trace.proj_input = x;
    Ok((tokens_from_map(&proj), trace))
}

/// Dispatches on `config.variant`, returning tokens and the forward trace.
pub fn stem_forward_traced(
    image: &Tensor,
    config: &StemConfig,
    params: &StemParams,
) -> Result<(Tensor, StemTrace)> {
    forward_impl(image, config, params, config.split_layers(), None)
}

pub fn stem_forward(image: &Tensor, config: &StemConfig, params: &StemParams) -> Result<Tensor> {
    Ok(stem_forward_traced(image, config, params)?.0)
}

/// Batch-normalization statistics of every block, in block order; split blocks
/// record their batch-normalized half only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemStats {
    pub blocks: Vec<ChannelStats>,
}

/// Statistics of a reference batch, for later use with [`stem_forward_frozen`].
pub fn stem_statistics(image: &Tensor, config: &StemConfig, params: &StemParams) -> Result<StemStats> {
    let (_, trace) = stem_forward_traced(image, config, params)?;
    let blocks = trace
        .conv_outs
        .iter()
        .zip(&params.blocks)
        .map(|(out, block)| channel_stats(&batch_part(out, &block.norm)))
        .collect::<Result<_>>()?;
    Ok(StemStats { blocks })
}

/// Forward pass with batch normalization fixed to precomputed statistics, so
/// each image is processed independently of the rest of the batch.
pub fn stem_forward_frozen(image: &Tensor, config: &StemConfig, params: &StemParams, stats: &StemStats) -> Result<Tensor> {
    Ok(forward_impl(image, config, params, config.split_layers(), Some(stats))?.0)
}

/// A single stride-p p×p convolution to `D` channels, flattened row-major.
pub fn patchify_forward(image: &Tensor, config: &StemConfig, params: &StemParams) -> Result<Tensor> {
    expect_variant(config, &[StemVariant::Patchify])?;
    Ok(forward_impl(image, config, params, 0, None)?.0)
}

/// Every block uses batch normalization.
pub fn conv_stem_forward(image: &Tensor, config: &StemConfig, params: &StemParams) -> Result<Tensor> {
    expect_variant(config, &[StemVariant::Conv, StemVariant::Ics])?;
    let conv_config = StemConfig {
        variant: StemVariant::Conv,
        ..config.clone()
    };
    Ok(forward_impl(image, &conv_config, params, 0, None)?.0)
}

/// The first `in_layers` blocks split their normalization half-IN/half-BN.
pub fn ics_forward(image: &Tensor, config: &StemConfig, params: &StemParams) -> Result<Tensor> {
    expect_variant(config, &[StemVariant::Ics])?;
    Ok(forward_impl(image, config, params, config.in_layers, None)?.0)
}

fn expect_variant(config: &StemConfig, allowed: &[StemVariant]) -> Result<()> {
    if allowed.contains(&config.variant) {
        Ok(())
    } else {
        Err(CurateError::Config(format!(
            "stem variant {:?} not valid here (expected one of {allowed:?})",
            config.variant
        )))
    }
}

/// Backpropagates a `B×T×D` token gradient through the stem. Returns the image
/// gradient and parameter gradients shaped like `params`.
pub fn stem_backward(
    config: &StemConfig,
    params: &StemParams,
    trace: &StemTrace,
    grad_tokens: &Tensor,
) -> Result<(Tensor, StemParams)> {
    let mut grads = params.zeros_like();
    let map_grad = map_from_tokens(grad_tokens, trace.grid);
    let g = conv2d_backward(&trace.proj_input, &params.proj_kernel, proj_geometry(config), &map_grad)?;
    grads.proj_kernel = g.param_grads["kernel"].clone();
    grads.proj_bias = g.param_grads["bias"].clone();
    let mut upstream = g.input_grad;
    let geom = block_geometry(config);
    for i in (0..params.blocks.len()).rev() {
        let block = &params.blocks[i];
        let d_norm = activation_backward(&trace.norm_outs[i], Activation::Relu, &upstream)?;
        let d_conv = norm_block_backward(
            &trace.conv_outs[i],
            &block.norm,
            config.eps,
            &d_norm,
            &mut grads.blocks[i].norm,
        )?;
        let g = conv2d_backward(&trace.block_inputs[i], &block.kernel, geom, &d_conv)?;
        grads.blocks[i].kernel = g.param_grads["kernel"].clone();
        grads.blocks[i].bias = g.param_grads["bias"].clone();
        upstream = g.input_grad;
    }
    Ok((upstream, grads))
}
