//! File formats and the synthetic domain-shift corpus.
//!
//! Embedding files (`EMB1`) are little-endian:
//!
//! ```text
//! magic   4 bytes  "EMB1"
//! version u16      1
//! count   u32
//! dim     u32
//! ids     count × (u32 byte length, UTF-8 bytes)
//! values  count × dim × f32, row-major
//! ```
//!
//! Features are `f64` in memory and narrowed to `f32` on write, so a round trip
//! is exact only at 32-bit precision.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cfs::EmbeddingSet;
use crate::error::{CurateError, Result};
use crate::image::Image;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const EMBEDDING_VERSION: u16 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub fn embeddings_to_bytes(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let count = u32::try_from(set.len()).map_err(|_| CurateError::Range("too many records".into()))?;
    let dim = u32::try_from(set.dim()).map_err(|_| CurateError::Range("dim too large".into()))?;
    let mut out = Vec::with_capacity(14 + set.features().len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for id in set.ids() {
        let len = u32::try_from(id.len()).map_err(|_| CurateError::Range("id too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for &v in set.features() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(CurateError::Range(format!("feature {v} overflows f32")));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, block: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CurateError::Format(format!(
                "truncated {block} block at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, block: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, block)?.try_into().expect("4 bytes")))
    }
}

pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "header")? != EMBEDDING_MAGIC {
        return Err(CurateError::Format("bad magic, expected EMB1".into()));
    }
    let version = u16::from_le_bytes(cur.take(2, "header")?.try_into().expect("2 bytes"));
    if version != EMBEDDING_VERSION {
        return Err(CurateError::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("header")? as usize;
    let dim = cur.u32("header")? as usize;
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = cur.u32("ids")? as usize;
        let raw = cur.take(len, "ids")?;
        let id = std::str::from_utf8(raw).map_err(|e| CurateError::Format(format!("id is not UTF-8: {e}")))?;
        ids.push(id.to_string());
    }
    let values = count
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| CurateError::Format("declared size overflows".into()))?;
    let raw = cur.take(values, "features")?;
    if cur.pos != bytes.len() {
        return Err(CurateError::Format(format!(
            "{} trailing bytes after features block",
            bytes.len() - cur.pos
        )));
    }
    let features = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    EmbeddingSet::new(ids, dim, features).map_err(|e| CurateError::Format(e.to_string()))
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let bytes = embeddings_to_bytes(set)?;
    fs::write(path, bytes).map_err(|e| CurateError::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| CurateError::io(path, e))?;
    embeddings_from_bytes(&bytes)
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(CurateError::Format("PPM header ends early".into()));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CurateError::Format(format!("bad PPM {what}")))
}

/// Decodes a binary P6 PPM with maxval 255.
pub fn image_from_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != b"P6" {
        return Err(CurateError::Format("not a binary P6 PPM".into()));
    }
    let width = ppm_number(bytes, &mut pos, "width")?;
    let height = ppm_number(bytes, &mut pos, "height")?;
    let maxval = ppm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(CurateError::Format(format!("maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(CurateError::Format("PPM has a zero side".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    let expected = 3 * width * height;
    if payload.len() != expected {
        return Err(CurateError::Format(format!(
            "PPM payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let hw = width * height;
    let mut data = vec![0.0; expected];
    for (p, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + p] = px[c] as f64 / 255.0;
        }
    }
    Image::new(height, width, data)
}

pub fn image_to_ppm(image: &Image) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    for p in 0..hw {
        for c in 0..3 {
            out.push((image.data()[c * hw + p] * 255.0).round() as u8);
        }
    }
    out
}

pub fn read_image_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| CurateError::io(path, e))?;
    image_from_ppm(&bytes)
}

pub fn write_image_ppm(image: &Image, path: &Path) -> Result<()> {
    fs::write(path, image_to_ppm(image)).map_err(|e| CurateError::io(path, e))
}

/// Self-describing JSON report: the resolved configuration travels with the
/// results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<C, R> {
    pub schema_version: u32,
    pub tool: String,
    pub config: C,
    pub results: R,
}

impl<C: Serialize, R: Serialize> Report<C, R> {
    pub fn new(tool: &str, config: C, results: R) -> Self {
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            tool: tool.to_string(),
            config,
            results,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| CurateError::io(path, e))
    }
}

pub fn read_report<C: DeserializeOwned, R: DeserializeOwned>(path: &Path) -> Result<Report<C, R>> {
    let text = fs::read_to_string(path).map_err(|e| CurateError::io(path, e))?;
    let report: Report<C, R> =
        serde_json::from_str(&text).map_err(|e| CurateError::Format(format!("{}: {e}", path.display())))?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(CurateError::Format(format!(
            "schema_version {} is not supported",
            report.schema_version
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub brightness_offset: f64,
    /// Rotation about the gray axis, in radians.
    pub hue_rotation: f64,
    pub noise_sigma: f64,
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift {
        brightness_offset: 0.0,
        hue_rotation: 0.0,
        noise_sigma: 0.0,
    };
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            brightness_offset: 0.25,
            hue_rotation: 1.2,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_domain: usize,
    pub height: usize,
    pub width: usize,
    pub shift: DomainShift,
    /// Fraction of source images pushed away from the target domain.
    pub extreme_fraction: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_per_domain: usize, height: usize, width: usize, shift: DomainShift) -> Self {
        SynthConfig {
            seed,
            n_per_domain,
            height,
            width,
            shift,
            extreme_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub source_ids: Vec<String>,
    pub source: Vec<Image>,
    pub target_ids: Vec<String>,
    pub target: Vec<Image>,
}

fn mix_seed(seed: u64, domain: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(domain.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hue_matrix(angle: f64) -> [[f64; 3]; 3] {
    // Rodrigues rotation about (1,1,1)/√3
    let (s, c) = angle.sin_cos();
    let k = 1.0 / 3f64.sqrt();
    let t = 1.0 - c;
    let a = c + t / 3.0;
    let b = t / 3.0 - s * k;
    let d = t / 3.0 + s * k;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Clean scene: textured background plus a few colored rectangles.
fn draw_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.65));
    let freq = rng.random_range(0.2..0.9);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (sa, ca) = angle.sin_cos();
    let amp = rng.random_range(0.03..0.1);
    let mut data = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let wave = amp * ((x as f64 * ca + y as f64 * sa) * freq).sin();
            for c in 0..3 {
                data[c * hw + y * w + x] = base[c] + wave;
            }
        }
    }
    let figures = rng.random_range(1..=3);
    for _ in 0..figures {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let fh = rng.random_range(h / 4..=h / 2).max(1);
        let fw = rng.random_range(w / 4..=w / 2).max(1);
        let top = rng.random_range(0..=h - fh);
        let left = rng.random_range(0..=w - fw);
        for y in top..top + fh {
            for x in left..left + fw {
                for c in 0..3 {
                    data[c * hw + y * w + x] = color[c];
                }
            }
        }
    }
    data
}

/// Applies a shift scaled by `strength` to a clean scene; noise uses `noise_scale`.
fn apply_shift(rng: &mut ChaCha8Rng, data: &mut [f64], shift: &DomainShift, strength: f64, noise_scale: f64) {
    let hw = data.len() / 3;
    let m = hue_matrix(strength * shift.hue_rotation);
    for p in 0..hw {
        let rgb = [data[p], data[hw + p], data[2 * hw + p]];
        for c in 0..3 {
            data[c * hw + p] = m[c].iter().zip(rgb).map(|(a, v)| a * v).sum::<f64>() + strength * shift.brightness_offset;
        }
    }
    if shift.noise_sigma > 0.0 && noise_scale > 0.0 {
        let normal = Normal::new(0.0, shift.noise_sigma * noise_scale).expect("positive sigma");
        for v in data.iter_mut() {
            *v += normal.sample(rng);
        }
    }
}

fn synth_image(config: &SynthConfig, domain: u64, index: usize) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, domain, index as u64));
    let mut data = draw_scene(&mut rng, config.height, config.width);
    let (strength, noise) = if domain == 1 {
        (1.0, 1.0)
    } else if rng.random::<f64>() < config.extreme_fraction {
        // Opposite direction with doubled noise: far from the target.
        (-1.5, 2.0)
    } else {
        let u = rng.random::<f64>();
        (u, u)
    };
    apply_shift(&mut rng, &mut data, &config.shift, strength, noise);
    Image::clamped(config.height, config.width, data)
}

/// Seeded source/target corpora. Target images carry the full shift; each
/// source image carries a random fraction of it, except an `extreme_fraction`
/// tail shifted the opposite way with extra noise.
pub fn synth_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    use rayon::prelude::*;
    if config.height == 0 || config.width == 0 {
        return Err(CurateError::Dimension("image sides must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.extreme_fraction) {
        return Err(CurateError::Range("extreme_fraction outside [0, 1]".into()));
    }
    let n = config.n_per_domain;
    let source = (0..n).into_par_iter().map(|i| synth_image(config, 0, i)).collect::<Result<_>>()?;
    let target = (0..n).into_par_iter().map(|i| synth_image(config, 1, i)).collect::<Result<_>>()?;
    Ok(SynthCorpus {
        source_ids: (0..n).map(|i| format!("src-{i:05}")).collect(),
        source,
        target_ids: (0..n).map(|i| format!("tgt-{i:05}")).collect(),
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> EmbeddingSet {
        EmbeddingSet::new(
            vec!["a".into(), "béta".into(), "".into()],
            2,
            vec![0.1, -2.5, 1e-3, 7.0, 0.0, 3.25],
        )
        .unwrap()
    }

    #[test]
    fn embedding_round_trip() {
        let set = sample_set();
        let back = embeddings_from_bytes(&embeddings_to_bytes(&set).unwrap()).unwrap();
        assert_eq!(back.ids(), set.ids());
        for (a, b) in back.features().iter().zip(set.features()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let empty = EmbeddingSet::new(vec![], 5, vec![]).unwrap();
        let bytes = embeddings_to_bytes(&empty).unwrap();
        assert_eq!(bytes.len(), 14);
        assert_eq!(embeddings_from_bytes(&bytes).unwrap().dim(), 5);
    }

    #[test]
    fn truncation_names_the_block() {
        let bytes = embeddings_to_bytes(&sample_set()).unwrap();
        let msg = |n: usize| embeddings_from_bytes(&bytes[..n]).unwrap_err().to_string();
        assert!(msg(9).contains("header"));
        assert!(msg(16).contains("ids"));
        assert!(msg(bytes.len() - 1).contains("features"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(embeddings_from_bytes(&bad), Err(CurateError::Format(_))));
    }

    #[test]
    fn ppm_examples() {
        let white = image_from_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(white.data(), &[1.0, 1.0, 1.0]);
        let black = image_from_ppm(b"P6 1 1 255 \x00\x00\x00").unwrap();
        assert_eq!(black.data(), &[0.0, 0.0, 0.0]);
        assert!(matches!(image_from_ppm(b"P6\n2 1\n255\n\x01\x02\x03\x04\x05"), Err(CurateError::Format(_))));
        assert!(image_from_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(image_from_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        let im = image_from_ppm(b"P6\n# note\n2 1\n255\n\x00\x80\xff\x10\x20\x30").unwrap();
        assert_eq!(image_from_ppm(&image_to_ppm(&im)).unwrap(), im);
        assert_eq!(im.at(2, 0, 1), 0x30 as f64 / 255.0);
    }

    #[test]
    fn report_json_is_stable() {
        let r = Report::new("t", vec![1, 2], vec!["x".to_string()]);
        let a = r.to_json().unwrap();
        assert_eq!(a, r.to_json().unwrap());
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["schema_version"], 1);
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig::new(3, 4, 8, 8, DomainShift::default());
        let a = synth_corpus(&cfg).unwrap();
        assert_eq!(a, synth_corpus(&cfg).unwrap());
        assert_eq!(a.source.len(), 4);
        assert_eq!(a.target_ids[3], "tgt-00003");
        let empty = synth_corpus(&SynthConfig::new(3, 0, 8, 8, DomainShift::default())).unwrap();
        assert!(empty.source.is_empty() && empty.target.is_empty());
    }

    #[test]
    fn zero_shift_domains_match_in_mean() {
        let cfg = SynthConfig::new(17, 200, 16, 16, DomainShift::NONE);
        let c = synth_corpus(&cfg).unwrap();
        let means = |ims: &[Image]| -> (f64, f64) {
            let m: Vec<f64> = ims.iter().map(Image::mean).collect();
            let mu = m.iter().sum::<f64>() / m.len() as f64;
            let var = m.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (m.len() - 1) as f64;
            (mu, var)
        };
        let (ms, vs) = means(&c.source);
        let (mt, vt) = means(&c.target);
        let se = (vs / 200.0 + vt / 200.0).sqrt();
        assert!((ms - mt).abs() <= 3.0 * se, "{ms} vs {mt}, se {se}");
    }

    #[test]
    fn hue_rotation_preserves_gray() {
        let m = hue_matrix(0.7);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
