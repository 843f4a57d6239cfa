//! A small pre-norm ViT encoder that turns stem tokens into one feature vector
//! per image (the class-token output after the final layer norm).
//!
//! Stems with batch normalization make each image's features depend on the rest
//! of the batch: [`encode_batch`] uses statistics over the whole provided batch.
//! [`EncodeMode::PerImage`] evaluates each image as its own batch of one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfs::EmbeddingSet;
use crate::error::{CurateError, Result};
use crate::stems::{
    stem_backward, stem_forward_frozen, stem_forward_traced, stem_statistics, StemConfig, StemParams, StemStats,
    StemTrace,
};
use crate::tensor::{
    activation, activation_backward, matmul_nt_raw, matmul_raw, matmul_tn_raw, normalize,
    normalize_backward, softmax, softmax_backward, Activation, NormMode, Tensor, DEFAULT_EPS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub eps: f64,
    pub stem: StemConfig,
}

impl ViTConfig {
    pub fn new(stem: StemConfig, depth: usize, heads: usize, image_height: usize, image_width: usize) -> Self {
        ViTConfig {
            depth,
            heads,
            embed_dim: stem.embed_dim,
            mlp_ratio: 4.0,
            image_height,
            image_width,
            eps: DEFAULT_EPS,
            stem,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stem.validate()?;
        if self.embed_dim != self.stem.embed_dim {
            return Err(CurateError::Config(format!(
                "encoder dim {} differs from stem dim {}",
                self.embed_dim, self.stem.embed_dim
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(CurateError::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.hidden_dim() == 0 {
            return Err(CurateError::Config("mlp hidden width is zero".into()));
        }
        if !(self.eps > 0.0) {
            return Err(CurateError::Config("eps must be positive".into()));
        }
        self.stem.grid(self.image_height, self.image_width)?;
        Ok(())
    }

    /// Patch tokens per image, excluding the class token.
    pub fn tokens(&self) -> Result<usize> {
        let (h, w) = self.stem.grid(self.image_height, self.image_width)?;
        Ok(h * w)
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// `D × 3D`, columns ordered `[q | k | v]`.
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub stem: StemParams,
    pub cls_token: Tensor,
    /// `(T+1) × D`; row 0 belongs to the class token.
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Seeded initializer: stem as [`StemParams::init`], linear weights uniform in
/// `±1/√fan_in` with zero biases, class token and positional embeddings drawn
/// from `N(0, 0.02²)`, layer norms at `gamma = 1`, `beta = 0`.
pub fn init_params(seed: u64, config: &ViTConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let hidden = config.hidden_dim();
    let stem = StemParams::init(&config.stem, &mut rng)?;
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let cls_token = Tensor::from_fn(&[d], |_| normal.sample(&mut rng));
    let rows = config.tokens()? + 1;
    let pos_embed = Tensor::from_fn(&[rows, d], |_| normal.sample(&mut rng));
    let blocks = (0..config.depth)
        .map(|_| BlockParams {
            ln1_gamma: Tensor::filled(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            qkv_w: uniform(&[d, 3 * d], d, &mut rng),
            qkv_b: Tensor::zeros(&[3 * d]),
            proj_w: uniform(&[d, d], d, &mut rng),
            proj_b: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::filled(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            fc1_w: uniform(&[d, hidden], d, &mut rng),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: uniform(&[hidden, d], hidden, &mut rng),
            fc2_b: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(ModelParams {
        stem,
        cls_token,
        pos_embed,
        blocks,
        norm_gamma: Tensor::filled(&[d], 1.0),
        norm_beta: Tensor::zeros(&[d]),
    })
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1_gamma", "ln1_beta", "qkv_w", "qkv_b", "proj_w", "proj_b", "ln2_gamma", "ln2_beta",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b",
];

impl BlockParams {
    fn fields(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.qkv_w,
            &self.qkv_b,
            &self.proj_w,
            &self.proj_b,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

impl ModelParams {
    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.stem.named();
        out.push(("cls_token".into(), &self.cls_token));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("norm_gamma".into(), &self.norm_gamma));
        out.push(("norm_beta".into(), &self.norm_beta));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.stem.named_mut();
        out.push(("cls_token".into(), &mut self.cls_token));
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields_mut()) {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("norm_gamma".into(), &mut self.norm_gamma));
        out.push(("norm_beta".into(), &mut self.norm_beta));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.named_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    /// Normalization statistics over the whole provided batch.
    #[default]
    Batch,
    /// Each image encoded alone, making features independent of batch composition.
    PerImage,
}

// ---------------------------------------------------------------------------
// dense helpers on row-major matrices

fn linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    let mut y = matmul_raw(x, w.data(), rows, inp, out);
    for row in y.chunks_mut(out) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    y
}

/// Returns dx and accumulates into dw, db.
fn linear_backward(
    x: &[f64],
    rows: usize,
    w: &Tensor,
    dy: &[f64],
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    let gw = matmul_tn_raw(x, dy, rows, inp, out);
    for (a, g) in dw.data_mut().iter_mut().zip(gw) {
        *a += g;
    }
    for row in dy.chunks(out) {
        for (a, g) in db.data_mut().iter_mut().zip(row) {
            *a += g;
        }
    }
    matmul_nt_raw(dy, w.data(), rows, out, inp)
}

fn layer_norm(x: &[f64], d: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Vec<f64>> {
    let t = Tensor::from_parts(vec![x.len() / d, d], x.to_vec());
    Ok(normalize(&t, NormMode::Layer, gamma, beta, eps)?.into_data())
}

fn layer_norm_backward(
    x: &[f64],
    d: usize,
    gamma: &Tensor,
    eps: f64,
    dy: &[f64],
    dgamma: &mut Tensor,
    dbeta: &mut Tensor,
) -> Result<Vec<f64>> {
    let rows = x.len() / d;
    let t = Tensor::from_parts(vec![rows, d], x.to_vec());
    let g = Tensor::from_parts(vec![rows, d], dy.to_vec());
    let grads = normalize_backward(&t, NormMode::Layer, gamma, eps, &g)?;
    dgamma.add_assign(&grads.param_grads["gamma"])?;
    dbeta.add_assign(&grads.param_grads["beta"])?;
    Ok(grads.input_grad.into_data())
}

// ---------------------------------------------------------------------------
// encoder forward/backward

struct BlockTrace {
    x_in: Vec<f64>,
    a: Vec<f64>,
    qkv: Vec<f64>,
    /// Attention probabilities per (image, head), each `S×S`.
    probs: Vec<Tensor>,
    attn: Vec<f64>,
    x_mid: Vec<f64>,
    m: Vec<f64>,
    h1: Vec<f64>,
    g: Vec<f64>,
}

/// Forward values of the transformer part, kept for [`model_backward`].
pub struct EncoderTrace {
    batch: usize,
    seq: usize,
    blocks: Vec<BlockTrace>,
    x_final: Vec<f64>,
    cls_rows: Vec<f64>,
}

fn attention_forward(
    qkv: &[f64],
    batch: usize,
    seq: usize,
    config: &ViTConfig,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let d = config.embed_dim;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * seq * d];
    let mut probs = Vec::with_capacity(batch * config.heads);
    for b in 0..batch {
        for h in 0..config.heads {
            let q = |i: usize, k: usize| qkv[(b * seq + i) * 3 * d + h * dh + k];
            let kk = |j: usize, k: usize| qkv[(b * seq + j) * 3 * d + d + h * dh + k];
            let v = |j: usize, k: usize| qkv[(b * seq + j) * 3 * d + 2 * d + h * dh + k];
            let scores = Tensor::from_fn(&[seq, seq], |idx| {
                let (i, j) = (idx / seq, idx % seq);
                (0..dh).map(|k| q(i, k) * kk(j, k)).sum::<f64>() * scale
            });
            let p = softmax(&scores, 1)?;
            for i in 0..seq {
                for k in 0..dh {
                    out[(b * seq + i) * d + h * dh + k] =
                        (0..seq).map(|j| p.data()[i * seq + j] * v(j, k)).sum();
                }
            }
            probs.push(p);
        }
    }
    Ok((out, probs))
}

fn attention_backward(
    qkv: &[f64],
    probs: &[Tensor],
    d_out: &[f64],
    batch: usize,
    seq: usize,
    config: &ViTConfig,
) -> Result<Vec<f64>> {
    let d = config.embed_dim;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; qkv.len()];
    for b in 0..batch {
        for h in 0..config.heads {
            let p = &probs[b * config.heads + h];
            let qi = |i: usize, k: usize| (b * seq + i) * 3 * d + h * dh + k;
            let ki = |j: usize, k: usize| (b * seq + j) * 3 * d + d + h * dh + k;
            let vi = |j: usize, k: usize| (b * seq + j) * 3 * d + 2 * d + h * dh + k;
            let doi = |i: usize, k: usize| (b * seq + i) * d + h * dh + k;
            let dp = Tensor::from_fn(&[seq, seq], |idx| {
                let (i, j) = (idx / seq, idx % seq);
                (0..dh).map(|k| d_out[doi(i, k)] * qkv[vi(j, k)]).sum()
            });
            for j in 0..seq {
                for k in 0..dh {
                    dqkv[vi(j, k)] += (0..seq).map(|i| p.data()[i * seq + j] * d_out[doi(i, k)]).sum::<f64>();
                }
            }
            let ds = softmax_backward(p, 1, &dp)?;
            for i in 0..seq {
                for j in 0..seq {
                    let g = ds.data()[i * seq + j] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..dh {
                        dqkv[qi(i, k)] += g * qkv[ki(j, k)];
                        dqkv[ki(j, k)] += g * qkv[qi(i, k)];
                    }
                }
            }
        }
    }
    Ok(dqkv)
}

fn check_tokens(tokens: &Tensor, config: &ViTConfig, params: &ModelParams) -> Result<(usize, usize)> {
    tokens.expect_rank(3, "encoder tokens")?;
    let (b, t, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    if d != config.embed_dim {
        return Err(CurateError::Dimension(format!(
            "tokens have dim {d}, encoder expects {}",
            config.embed_dim
        )));
    }
    if params.pos_embed.shape() != [t + 1, d] {
        return Err(CurateError::Dimension(format!(
            "{t} tokens do not fit positional embedding {:?}",
            params.pos_embed.shape()
        )));
    }
    if params.blocks.len() != config.depth {
        return Err(CurateError::Config("block count differs from depth".into()));
    }
    Ok((b, t + 1))
}

fn encoder_forward(tokens: &Tensor, config: &ViTConfig, params: &ModelParams) -> Result<(Tensor, EncoderTrace)> {
    let (batch, seq) = check_tokens(tokens, config, params)?;
    let d = config.embed_dim;
    let hidden = config.hidden_dim();
    let rows = batch * seq;
    let mut x = vec![0.0; rows * d];
    for b in 0..batch {
        for s in 0..seq {
            for k in 0..d {
                let tok = if s == 0 {
                    params.cls_token.data()[k]
                } else {
                    tokens.data()[(b * (seq - 1) + s - 1) * d + k]
                };
                x[(b * seq + s) * d + k] = tok + params.pos_embed.data()[s * d + k];
            }
        }
    }
    let mut traces = Vec::with_capacity(config.depth);
    for bp in &params.blocks {
        let a = layer_norm(&x, d, &bp.ln1_gamma, &bp.ln1_beta, config.eps)?;
        let qkv = linear(&a, rows, &bp.qkv_w, &bp.qkv_b);
        let (attn, probs) = attention_forward(&qkv, batch, seq, config)?;
        let y = linear(&attn, rows, &bp.proj_w, &bp.proj_b);
        let x_mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let m = layer_norm(&x_mid, d, &bp.ln2_gamma, &bp.ln2_beta, config.eps)?;
        let h1 = linear(&m, rows, &bp.fc1_w, &bp.fc1_b);
        let g = activation(&Tensor::from_parts(vec![rows, hidden], h1.clone()), Activation::Gelu).into_data();
        let z = linear(&g, rows, &bp.fc2_w, &bp.fc2_b);
        let x_out: Vec<f64> = x_mid.iter().zip(&z).map(|(a, b)| a + b).collect();
        traces.push(BlockTrace {
            x_in: std::mem::replace(&mut x, x_out),
            a,
            qkv,
            probs,
            attn,
            x_mid,
            m,
            h1,
            g,
        });
    }
    let mut cls_rows = Vec::with_capacity(batch * d);
    for b in 0..batch {
        cls_rows.extend_from_slice(&x[b * seq * d..(b * seq + 1) * d]);
    }
    let out = layer_norm(&cls_rows, d, &params.norm_gamma, &params.norm_beta, config.eps)?;
    Ok((
        Tensor::from_parts(vec![batch, d], out),
        EncoderTrace {
            batch,
            seq,
            blocks: traces,
            x_final: x,
            cls_rows,
        },
    ))
}

/// Returns the token gradient; accumulates parameter gradients into `grads`.
fn encoder_backward(
    config: &ViTConfig,
    params: &ModelParams,
    trace: &EncoderTrace,
    grad_out: &Tensor,
    grads: &mut ModelParams,
) -> Result<Tensor> {
    let d = config.embed_dim;
    let hidden = config.hidden_dim();
    let (batch, seq) = (trace.batch, trace.seq);
    let rows = batch * seq;
    if grad_out.shape() != [batch, d] {
        return Err(CurateError::Dimension(format!(
            "feature gradient shape {:?}, expected [{batch}, {d}]",
            grad_out.shape()
        )));
    }
    let d_cls = layer_norm_backward(
        &trace.cls_rows,
        d,
        &params.norm_gamma,
        config.eps,
        grad_out.data(),
        &mut grads.norm_gamma,
        &mut grads.norm_beta,
    )?;
    let mut dx = vec![0.0; trace.x_final.len()];
    for b in 0..batch {
        dx[b * seq * d..(b * seq + 1) * d].copy_from_slice(&d_cls[b * d..(b + 1) * d]);
    }
    for (i, bt) in trace.blocks.iter().enumerate().rev() {
        let bp = &params.blocks[i];
        let gb = &mut grads.blocks[i];
        // x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        let dg = linear_backward(&bt.g, rows, &bp.fc2_w, &dx, &mut gb.fc2_w, &mut gb.fc2_b);
        let dh1 = activation_backward(
            &Tensor::from_parts(vec![rows, hidden], bt.h1.clone()),
            Activation::Gelu,
            &Tensor::from_parts(vec![rows, hidden], dg),
        )?
        .into_data();
        let dm = linear_backward(&bt.m, rows, &bp.fc1_w, &dh1, &mut gb.fc1_w, &mut gb.fc1_b);
        let dmid_ln = layer_norm_backward(&bt.x_mid, d, &bp.ln2_gamma, config.eps, &dm, &mut gb.ln2_gamma, &mut gb.ln2_beta)?;
        let d_mid: Vec<f64> = dx.iter().zip(&dmid_ln).map(|(a, b)| a + b).collect();
        // x_mid = x_in + proj(attn(qkv(ln1(x_in))))
        let d_attn = linear_backward(&bt.attn, rows, &bp.proj_w, &d_mid, &mut gb.proj_w, &mut gb.proj_b);
        let dqkv = attention_backward(&bt.qkv, &bt.probs, &d_attn, batch, seq, config)?;
        let da = linear_backward(&bt.a, rows, &bp.qkv_w, &dqkv, &mut gb.qkv_w, &mut gb.qkv_b);
        let din_ln = layer_norm_backward(&bt.x_in, d, &bp.ln1_gamma, config.eps, &da, &mut gb.ln1_gamma, &mut gb.ln1_beta)?;
        dx = d_mid.iter().zip(&din_ln).map(|(a, b)| a + b).collect();
    }
    let t = seq - 1;
    let mut d_tokens = vec![0.0; batch * t * d];
    for b in 0..batch {
        for s in 0..seq {
            for k in 0..d {
                let g = dx[(b * seq + s) * d + k];
                grads.pos_embed.data_mut()[s * d + k] += g;
                if s == 0 {
                    grads.cls_token.data_mut()[k] += g;
                } else {
                    d_tokens[(b * t + s - 1) * d + k] = g;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch, t, d], d_tokens))
}

/// Runs the transformer on precomputed `B×T×D` tokens.
pub fn encode_tokens(tokens: &Tensor, config: &ViTConfig, params: &ModelParams) -> Result<Tensor> {
    Ok(encoder_forward(tokens, config, params)?.0)
}

fn check_images(images: &Tensor, config: &ViTConfig) -> Result<()> {
    config.validate()?;
    images.expect_rank(4, "images")?;
    let (h, w) = (images.shape()[2], images.shape()[3]);
    if (h, w) != (config.image_height, config.image_width) {
        return Err(CurateError::Dimension(format!(
            "image size {h}×{w} differs from configured {}×{}",
            config.image_height, config.image_width
        )));
    }
    Ok(())
}

/// Encodes a `B×3×H×W` batch to `B×D` features with batch-level normalization
/// statistics in the stem.
pub fn encode_batch(images: &Tensor, config: &ViTConfig, params: &ModelParams) -> Result<Tensor> {
    check_images(images, config)?;
    let (tokens, _) = stem_forward_traced(images, &config.stem, &params.stem)?;
    encode_tokens(&tokens, config, params)
}

/// Stem batch-normalization statistics of a reference batch.
pub fn calibrate(images: &Tensor, config: &ViTConfig, params: &ModelParams) -> Result<StemStats> {
    check_images(images, config)?;
    stem_statistics(images, &config.stem, &params.stem)
}

/// Encodes with stem batch normalization fixed to `stats`, as a trained model
/// would at inference.
pub fn encode_frozen(images: &Tensor, config: &ViTConfig, params: &ModelParams, stats: &StemStats) -> Result<Tensor> {
    check_images(images, config)?;
    let tokens = stem_forward_frozen(images, &config.stem, &params.stem, stats)?;
    encode_tokens(&tokens, config, params)
}

/// Encodes with the chosen batch semantics.
pub fn encode_with_mode(
    images: &Tensor,
    config: &ViTConfig,
    params: &ModelParams,
    mode: EncodeMode,
) -> Result<Tensor> {
    match mode {
        EncodeMode::Batch => encode_batch(images, config, params),
        EncodeMode::PerImage => {
            check_images(images, config)?;
            let b = images.shape()[0];
            let per = images.len() / b;
            let mut single_shape = images.shape().to_vec();
            single_shape[0] = 1;
            let rows: Vec<Vec<f64>> = (0..b)
                .into_par_iter()
                .map(|i| {
                    let img = Tensor::from_parts(single_shape.clone(), images.data()[i * per..(i + 1) * per].to_vec());
                    encode_batch(&img, config, params).map(Tensor::into_data)
                })
                .collect::<Result<_>>()?;
            Ok(Tensor::from_parts(vec![b, config.embed_dim], rows.concat()))
        }
    }
}

/// Encodes and attaches ids, producing an embedding set for the CFS engine.
pub fn embed_corpus(
    ids: Vec<String>,
    images: &Tensor,
    config: &ViTConfig,
    params: &ModelParams,
    mode: EncodeMode,
) -> Result<EmbeddingSet> {
    let feats = encode_with_mode(images, config, params, mode)?;
    EmbeddingSet::new(ids, config.embed_dim, feats.into_data())
}

/// Full forward values of [`encode_batch`].
pub struct ModelTrace {
    stem: StemTrace,
    encoder: EncoderTrace,
}

pub fn model_forward_traced(
    images: &Tensor,
    config: &ViTConfig,
    params: &ModelParams,
) -> Result<(Tensor, ModelTrace)> {
    check_images(images, config)?;
    let (tokens, stem) = stem_forward_traced(images, &config.stem, &params.stem)?;
    let (out, encoder) = encoder_forward(&tokens, config, params)?;
    Ok((out, ModelTrace { stem, encoder }))
}

/// Backpropagates a `B×D` feature gradient. Returns the image gradient and
/// gradients for every parameter, shaped like `params`.
pub fn model_backward(
    config: &ViTConfig,
    params: &ModelParams,
    trace: &ModelTrace,
    grad_features: &Tensor,
) -> Result<(Tensor, ModelParams)> {
    let mut grads = params.zeros_like();
    let d_tokens = encoder_backward(config, params, &trace.encoder, grad_features, &mut grads)?;
    let (d_image, stem_grads) = stem_backward(&config.stem, &params.stem, &trace.stem, &d_tokens)?;
    grads.stem = stem_grads;
    Ok((d_image, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stems::{patchify_forward, StemVariant};

    fn config(variant: StemVariant) -> ViTConfig {
        ViTConfig::new(StemConfig::for_variant(variant, 16, 32).unwrap(), 2, 2, 32, 32)
    }

    fn images(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 3, 32, 32], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = config(StemVariant::Ics);
        let a = init_params(3, &c).unwrap();
        assert_eq!(a, init_params(3, &c).unwrap());
        assert_ne!(a, init_params(4, &c).unwrap());
        assert_eq!(a.pos_embed.shape(), &[5, 32]);

        let tall = ViTConfig::new(StemConfig::patchify(16, 8), 1, 2, 256, 128);
        assert_eq!(init_params(0, &tall).unwrap().pos_embed.shape(), &[129, 8]);
    }

    #[test]
    fn config_rejects_bad_heads() {
        let mut c = config(StemVariant::Patchify);
        c.heads = 3;
        assert!(matches!(init_params(0, &c), Err(CurateError::Config(_))));
    }

    #[test]
    fn features_have_embed_dim_for_every_stem() {
        for v in [StemVariant::Patchify, StemVariant::Conv, StemVariant::Ics] {
            let c = config(v);
            let p = init_params(1, &c).unwrap();
            let f = encode_batch(&images(3, 2), &c, &p).unwrap();
            assert_eq!(f.shape(), &[3, 32]);
            assert!(f.data().iter().all(|v| v.is_finite()));
            assert_eq!(f, encode_batch(&images(3, 2), &c, &p).unwrap());
        }
    }

    #[test]
    fn size_mismatch_is_dimension_error() {
        let c = config(StemVariant::Patchify);
        let p = init_params(1, &c).unwrap();
        let wrong = Tensor::zeros(&[1, 3, 48, 32]);
        assert!(matches!(encode_batch(&wrong, &c, &p), Err(CurateError::Dimension(_))));
    }

    #[test]
    fn zero_image_gives_class_token_pathway() {
        let c = config(StemVariant::Patchify);
        let p = init_params(9, &c).unwrap();
        let f = encode_batch(&Tensor::zeros(&[1, 3, 32, 32]), &c, &p).unwrap();
        assert!(f.data().iter().all(|v| v.is_finite()));
        // Zero tokens: the sequence is the class token plus positional embeddings alone.
        let zero_tokens = Tensor::zeros(&[1, 4, 32]);
        assert_eq!(f, encode_tokens(&zero_tokens, &c, &p).unwrap());
    }

    #[test]
    fn batch_permutation_permutes_features() {
        let c = config(StemVariant::Patchify);
        let p = init_params(5, &c).unwrap();
        let imgs = images(3, 6);
        let per = 3 * 32 * 32;
        let order = [2usize, 0, 1];
        let permuted = Tensor::from_parts(
            imgs.shape().to_vec(),
            order.iter().flat_map(|&i| imgs.data()[i * per..(i + 1) * per].to_vec()).collect(),
        );
        let a = encode_batch(&imgs, &c, &p).unwrap();
        let b = encode_batch(&permuted, &c, &p).unwrap();
        for (row, &src) in order.iter().enumerate() {
            assert_eq!(&b.data()[row * 32..(row + 1) * 32], &a.data()[src * 32..(src + 1) * 32]);
        }
    }

    #[test]
    fn per_image_mode_ignores_batch_mates() {
        let c = config(StemVariant::Conv);
        let p = init_params(5, &c).unwrap();
        let imgs = images(3, 7);
        let all = encode_with_mode(&imgs, &c, &p, EncodeMode::PerImage).unwrap();
        let first = Tensor::from_parts(vec![1, 3, 32, 32], imgs.data()[..3 * 32 * 32].to_vec());
        let alone = encode_batch(&first, &c, &p).unwrap();
        assert_eq!(&all.data()[..32], alone.data());
    }

    #[test]
    fn shuffling_patches_with_positions_leaves_output_unchanged() {
        let c = config(StemVariant::Patchify);
        let mut p = init_params(8, &c).unwrap();
        let imgs = images(2, 9);
        let tokens = patchify_forward(&imgs, &c.stem, &p.stem).unwrap();
        let base = encode_tokens(&tokens, &c, &p).unwrap();
        let perm = [3usize, 1, 0, 2];
        let (t, d) = (4, 32);
        let shuffled = Tensor::from_fn(&[2, t, d], |idx| {
            let (b, rest) = (idx / (t * d), idx % (t * d));
            let (s, k) = (rest / d, rest % d);
            tokens.data()[(b * t + perm[s]) * d + k]
        });
        let pos = p.pos_embed.clone();
        for s in 0..t {
            for k in 0..d {
                p.pos_embed.data_mut()[(s + 1) * d + k] = pos.data()[(perm[s] + 1) * d + k];
            }
        }
        let out = encode_tokens(&shuffled, &c, &p).unwrap();
        for (a, b) in base.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
