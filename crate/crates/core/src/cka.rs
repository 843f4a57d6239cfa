//! Deterministic appearance augmentations and linear CKA between the features
//! of an original corpus and its augmented copy.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CurateError, Result};
use crate::image::{images_to_tensor, Image};
use crate::tensor::{matmul_tn_raw, Tensor};
use crate::vit::{calibrate, encode_frozen, ModelParams, ViTConfig};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Brightness,
    Contrast,
    Saturation,
    Crop,
    Flip,
    Scale,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 6] = [
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::Saturation,
        AugmentKind::Crop,
        AugmentKind::Flip,
        AugmentKind::Scale,
    ];

    pub fn default_magnitude(self) -> f64 {
        match self {
            AugmentKind::Brightness => 0.3,
            AugmentKind::Contrast | AugmentKind::Saturation | AugmentKind::Scale => 0.5,
            AugmentKind::Crop => 0.2,
            AugmentKind::Flip => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Brightness => "brightness",
            AugmentKind::Contrast => "contrast",
            AugmentKind::Saturation => "saturation",
            AugmentKind::Crop => "crop",
            AugmentKind::Flip => "flip",
            AugmentKind::Scale => "scale",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = CurateError;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CurateError::Config(format!("unknown augmentation {s:?}")))
    }
}

/// One augmentation and its strength.
///
/// | kind       | magnitude range | effect                                        |
/// |------------|-----------------|-----------------------------------------------|
/// | brightness | any real        | adds the magnitude to every value             |
/// | contrast   | ≥ -1            | deviations from the image mean scaled by 1+m  |
/// | saturation | [0, 1]          | blend toward luma gray, 1 gives grayscale     |
/// | crop       | [0, 1)          | center crop to 1-m of each side, resized back |
/// | flip       | ignored         | horizontal mirror                             |
/// | scale      | [0, 1)          | bilinear down by 1-m, then back up            |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentKind,
    pub magnitude: f64,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentKind, magnitude: f64) -> Self {
        AugmentationSpec { kind, magnitude }
    }

    pub fn with_default(kind: AugmentKind) -> Self {
        AugmentationSpec::new(kind, kind.default_magnitude())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.magnitude;
        if !m.is_finite() {
            return Err(CurateError::Range(format!("{} magnitude is not finite", self.kind)));
        }
        let ok = match self.kind {
            AugmentKind::Brightness | AugmentKind::Flip => true,
            AugmentKind::Contrast => m >= -1.0,
            AugmentKind::Saturation => (0.0..=1.0).contains(&m),
            AugmentKind::Crop | AugmentKind::Scale => (0.0..1.0).contains(&m),
        };
        if ok {
            Ok(())
        } else {
            Err(CurateError::Range(format!("{} magnitude {m} out of range", self.kind)))
        }
    }
}

fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the window `[top, top+span_h) × [left, left+span_w)` of `image`
/// (continuous pixel units) onto an `out_h × out_w` grid, half-pixel aligned.
fn resample(image: &Image, top: f64, left: f64, span_h: f64, span_w: f64, out_h: usize, out_w: usize) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let plane = image.channel(c);
        for y in 0..out_h {
            let sy = top + (y as f64 + 0.5) * span_h / out_h as f64 - 0.5;
            for x in 0..out_w {
                let sx = left + (x as f64 + 0.5) * span_w / out_w as f64 - 0.5;
                out.push(sample_bilinear(plane, h, w, sy, sx));
            }
        }
    }
    out
}

pub fn augment(image: &Image, spec: &AugmentationSpec) -> Result<Image> {
    spec.validate()?;
    let (h, w) = (image.height(), image.width());
    let hw = h * w;
    let m = spec.magnitude;
    let src = image.data();
    let data: Vec<f64> = match spec.kind {
        AugmentKind::Brightness => src.iter().map(|v| v + m).collect(),
        AugmentKind::Contrast => {
            let mean = image.mean();
            src.iter().map(|v| mean + (1.0 + m) * (v - mean)).collect()
        }
        AugmentKind::Saturation => {
            let mut out = src.to_vec();
            for p in 0..hw {
                let gray: f64 = (0..3).map(|c| LUMA[c] * src[c * hw + p]).sum();
                for c in 0..3 {
                    out[c * hw + p] = (1.0 - m) * src[c * hw + p] + m * gray;
                }
            }
            out
        }
        AugmentKind::Crop => {
            let (span_h, span_w) = ((1.0 - m) * h as f64, (1.0 - m) * w as f64);
            let (top, left) = ((h as f64 - span_h) / 2.0, (w as f64 - span_w) / 2.0);
            resample(image, top, left, span_h, span_w, h, w)
        }
        AugmentKind::Flip => {
            let mut out = src.to_vec();
            for row in out.chunks_mut(w) {
                row.reverse();
            }
            out
        }
        AugmentKind::Scale => {
            let small_h = (((1.0 - m) * h as f64).round() as usize).max(1);
            let small_w = (((1.0 - m) * w as f64).round() as usize).max(1);
            let small = Image::clamped(
                small_h,
                small_w,
                resample(image, 0.0, 0.0, h as f64, w as f64, small_h, small_w),
            )?;
            resample(&small, 0.0, 0.0, small_h as f64, small_w as f64, h, w)
        }
    };
    Image::clamped(h, w, data)
}

pub fn augment_corpus(corpus: &[Image], spec: &AugmentationSpec) -> Result<Vec<Image>> {
    corpus.par_iter().map(|im| augment(im, spec)).collect()
}

fn centered(x: &Tensor, name: &str) -> Result<(Vec<f64>, usize, usize)> {
    x.expect_rank(2, name)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut data = x.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            data[i * d + j] -= mean;
        }
    }
    Ok((data, n, d))
}

fn frobenius_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Linear CKA of two `N×d` feature matrices over the same examples.
pub fn cka_linear(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (xc, n, dx) = centered(x, "X")?;
    let (yc, ny, dy) = centered(y, "Y")?;
    if n != ny {
        return Err(CurateError::Dimension(format!("{n} rows in X but {ny} in Y")));
    }
    if n < 2 {
        return Err(CurateError::Range("CKA needs at least two examples".into()));
    }
    let xx = frobenius_sq(&matmul_tn_raw(&xc, &xc, n, dx, dx)).sqrt();
    let yy = frobenius_sq(&matmul_tn_raw(&yc, &yc, n, dy, dy)).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(CurateError::DegenerateFeature(
            "centered feature matrix is all zero".into(),
        ));
    }
    let yx = frobenius_sq(&matmul_tn_raw(&yc, &xc, n, dy, dx));
    Ok(yx / (xx * yy))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaRow {
    pub kind: AugmentKind,
    pub magnitude: f64,
    pub cka: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub model: String,
    pub corpus: String,
    pub rows: Vec<CkaRow>,
}

impl CkaReport {
    pub fn score(&self, kind: AugmentKind) -> Option<f64> {
        self.rows.iter().find(|r| r.kind == kind).map(|r| r.cka)
    }
}

/// Encodes the corpus and each augmented copy and reports one CKA score per
/// requested augmentation, in request order. Stem batch normalization uses the
/// statistics of the original corpus throughout, so an augmentation cannot be
/// undone by re-estimating them on the augmented batch.
pub fn invariance_report(
    config: &ViTConfig,
    params: &ModelParams,
    corpus: &[Image],
    specs: &[AugmentationSpec],
    model: &str,
    corpus_name: &str,
) -> Result<CkaReport> {
    if corpus.is_empty() {
        return Err(CurateError::EmptyInput("corpus has no images".into()));
    }
    let originals = images_to_tensor(corpus)?;
    let stats = calibrate(&originals, config, params)?;
    let base = encode_frozen(&originals, config, params, &stats)?;
    let rows = specs
        .iter()
        .map(|spec| {
            let augmented = augment_corpus(corpus, spec)?;
            let feats = encode_frozen(&images_to_tensor(&augmented)?, config, params, &stats)?;
            Ok(CkaRow {
                kind: spec.kind,
                magnitude: spec.magnitude,
                cka: cka_linear(&base, &feats)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CkaReport {
        model: model.to_string(),
        corpus: corpus_name.to_string(),
        rows,
    })
}
