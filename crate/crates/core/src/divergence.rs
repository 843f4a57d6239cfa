//! Empirical HΔH distance over an explicit class of threshold stumps, and the
//! excess-risk bound evaluator.
//!
//! The distance is the exact supremum over the finite class supplied, so it
//! lower-bounds the same quantity taken over any richer class containing it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CurateError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    Constant(bool),
    /// `1[x[dim] > threshold]`
    Stump { dim: usize, threshold: f64 },
}

impl Hypothesis {
    pub fn predict(&self, x: &[f64]) -> bool {
        match *self {
            Hypothesis::Constant(v) => v,
            Hypothesis::Stump { dim, threshold } => x[dim] > threshold,
        }
    }
}

/// Constants first (0 then 1), then stumps grouped by dimension in request
/// order with ascending thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StumpClass {
    pub hypotheses: Vec<Hypothesis>,
}

impl StumpClass {
    pub fn constants_only() -> Self {
        StumpClass {
            hypotheses: vec![Hypothesis::Constant(false), Hypothesis::Constant(true)],
        }
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

fn sample_dim(samples: &[Vec<f64>]) -> Result<usize> {
    let d = samples
        .first()
        .ok_or_else(|| CurateError::Range("no samples".into()))?
        .len();
    if let Some(i) = samples.iter().position(|s| s.len() != d) {
        return Err(CurateError::Dimension(format!(
            "sample {i} has {} values, expected {d}",
            samples[i].len()
        )));
    }
    Ok(d)
}

/// Thresholds sit at midpoints of consecutive unique values of `samples`
/// (normally the pooled sample of both domains). When a dimension has more
/// candidates than `max_thresholds_per_dim`, an evenly spaced subset is kept.
pub fn build_stumps(samples: &[Vec<f64>], dims: &[usize], max_thresholds_per_dim: usize) -> Result<StumpClass> {
    let d = sample_dim(samples)?;
    let mut class = StumpClass::constants_only();
    for &dim in dims {
        if dim >= d {
            return Err(CurateError::Dimension(format!("dim {dim} outside 0..{d}")));
        }
        let mut values: Vec<f64> = samples.iter().map(|s| s[dim]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let candidates: Vec<f64> = values.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
        let c = candidates.len();
        let kept: Vec<f64> = if c > max_thresholds_per_dim {
            (0..max_thresholds_per_dim)
                .map(|i| candidates[i * c / max_thresholds_per_dim])
                .collect()
        } else {
            candidates
        };
        class
            .hypotheses
            .extend(kept.into_iter().map(|threshold| Hypothesis::Stump { dim, threshold }));
    }
    Ok(class)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdhDetail {
    pub distance: f64,
    /// Indices into the class of the maximizing ordered pair; the first in
    /// enumeration order wins ties.
    pub h: usize,
    pub h_prime: usize,
}

/// Predictions of one hypothesis over a sample, packed 64 per word.
fn predictions(h: &Hypothesis, samples: &[Vec<f64>]) -> Vec<u64> {
    let mut bits = vec![0u64; samples.len().div_ceil(64)];
    for (i, x) in samples.iter().enumerate() {
        if h.predict(x) {
            bits[i / 64] |= 1 << (i % 64);
        }
    }
    bits
}

fn disagreements(a: &[u64], b: &[u64]) -> u64 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones() as u64).sum()
}

pub fn hdh_detail(u1: &[Vec<f64>], u2: &[Vec<f64>], class: &StumpClass) -> Result<HdhDetail> {
    if u1.is_empty() || u2.is_empty() {
        return Err(CurateError::Range("both sample sets must be nonempty".into()));
    }
    let (d1, d2) = (sample_dim(u1)?, sample_dim(u2)?);
    if d1 != d2 {
        return Err(CurateError::Dimension(format!("sample dims {d1} and {d2} differ")));
    }
    if let Some(bad) = class.hypotheses.iter().find_map(|h| match h {
        Hypothesis::Stump { dim, .. } if *dim >= d1 => Some(*dim),
        _ => None,
    }) {
        return Err(CurateError::Dimension(format!("stump dim {bad} outside 0..{d1}")));
    }
    if class.is_empty() {
        return Err(CurateError::Range("hypothesis class is empty".into()));
    }
    let p1: Vec<Vec<u64>> = class.hypotheses.iter().map(|h| predictions(h, u1)).collect();
    let p2: Vec<Vec<u64>> = class.hypotheses.iter().map(|h| predictions(h, u2)).collect();
    let (n1, n2) = (u1.len() as f64, u2.len() as f64);
    let k = class.len();
    let best = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut row = HdhDetail { distance: -1.0, h: i, h_prime: 0 };
            for j in 0..k {
                let gap = (disagreements(&p1[i], &p1[j]) as f64 / n1 - disagreements(&p2[i], &p2[j]) as f64 / n2).abs();
                if gap > row.distance {
                    row = HdhDetail { distance: gap, h: i, h_prime: j };
                }
            }
            row
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(HdhDetail { distance: -1.0, h: 0, h_prime: 0 }, |acc, r| {
            if r.distance > acc.distance { r } else { acc }
        });
    Ok(best)
}

/// `max over (h, h')` of `|Pr_U1(h ≠ h') − Pr_U2(h ≠ h')|`.
pub fn hdh_empirical(u1: &[Vec<f64>], u2: &[Vec<f64>], class: &StumpClass) -> Result<f64> {
    Ok(hdh_detail(u1, u2, class)?.distance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub d_hdh: f64,
    pub f_hat_t: f64,
    pub f_t_star: f64,
    pub f_s_star: f64,
    /// VC dimension of the hypothesis class.
    pub vc_dim: u64,
    /// Target sample size.
    pub n: u64,
    pub delta: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CurateError::Range(format!("delta {} outside (0, 1)", self.delta)));
        }
        if self.n < 1 {
            return Err(CurateError::Range("n must be at least 1".into()));
        }
        for (name, v) in [
            ("d_hdh", self.d_hdh),
            ("f_hat_t", self.f_hat_t),
            ("f_t_star", self.f_t_star),
            ("f_s_star", self.f_s_star),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CurateError::Range(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub divergence: f64,
    pub risks: f64,
    pub hoeffding: f64,
    pub complexity: f64,
    pub total: f64,
}

pub fn erb_bound_terms(inputs: &BoundInputs) -> Result<BoundTerms> {
    inputs.validate()?;
    let n = inputs.n as f64;
    let d = inputs.vc_dim as f64;
    let log_term = (8.0 / inputs.delta).ln();
    let divergence = 1.5 * inputs.d_hdh;
    let risks = inputs.f_hat_t + inputs.f_t_star + inputs.f_s_star;
    let hoeffding = (log_term / (2.0 * n)).sqrt();
    let complexity = 12.0 * ((2.0 * d * (2.0 * n).ln() + log_term) / n).sqrt();
    Ok(BoundTerms {
        divergence,
        risks,
        hoeffding,
        complexity,
        total: divergence + risks + hoeffding + complexity,
    })
}

/// Right-hand side of the excess-risk bound:
/// `1.5·d_hdh + F̂_t + F_t* + F_s* + sqrt(ln(8/δ)/(2n)) + 12·sqrt((2d·ln(2n) + ln(8/δ))/n)`.
pub fn erb_bound_rhs(inputs: &BoundInputs) -> Result<f64> {
    Ok(erb_bound_terms(inputs)?.total)
}
