//! Catastrophic Forgetting Score and conditional filtering.
//!
//! Each source record `x` gets a score `c = cos(θ_s(x), θ_t(x))` comparing its
//! features under the source proxy and the target-fine-tuned proxy. Records are
//! ranked by descending score (ties by ascending original index) and the top
//! `N'` are kept.
//!
//! For unit-normalized features `d² = ‖θ̃_t − θ̃_s‖² = 2 − 2c`, so
//! `c ≥ 1 − ε²/8` holds exactly when `d ≤ ε/2`.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CurateError, Result};

/// Features for a corpus, one row per record, with stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    dim: usize,
    features: Vec<f64>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != ids.len() * dim {
            return Err(CurateError::Dimension(format!(
                "{} ids × dim {dim} needs {} values, got {}",
                ids.len(),
                ids.len() * dim,
                features.len()
            )));
        }
        if let Some(index) = features.iter().position(|v| !v.is_finite()) {
            return Err(CurateError::NonFinite { index });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(CurateError::Alignment(format!("duplicate id {id:?}")));
            }
        }
        Ok(EmbeddingSet { ids, dim, features })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(CurateError::Dimension("rows have differing lengths".into()));
        }
        Self::new(ids, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks(0) panics; an empty set with dim 0 has no rows anyway.
        self.features.chunks(self.dim.max(1)).take(self.ids.len())
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Result<EmbeddingSet> {
        let ids = indices.iter().map(|&i| self.ids[i].clone()).collect();
        let features = indices.iter().flat_map(|&i| self.row(i).to_vec()).collect();
        EmbeddingSet::new(ids, self.dim, features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: String,
    /// Position of the record in the scored corpus.
    pub index: usize,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Scores sorted by rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    entries: Vec<ScoreEntry>,
}

impl ScoreTable {
    /// Ranks raw per-record scores: descending score, ties by ascending index.
    pub fn from_scores(ids: &[String], scores: &[f64]) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(CurateError::Alignment(format!(
                "{} ids but {} scores",
                ids.len(),
                scores.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(CurateError::Range("NaN score".into()));
        }
        let order = rank_order(scores);
        let entries = order
            .into_iter()
            .enumerate()
            .map(|(pos, i)| ScoreEntry {
                id: ids[i].clone(),
                index: i,
                score: scores[i],
                rank: pos + 1,
            })
            .collect();
        Ok(ScoreTable { entries })
    }

    /// Rebuilds a table from stored entries, checking the rank invariants.
    pub fn from_entries(mut entries: Vec<ScoreEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.rank);
        for (pos, e) in entries.iter().enumerate() {
            if e.rank != pos + 1 {
                return Err(CurateError::Format("ranks are not a permutation of 1..N".into()));
            }
        }
        for w in entries.windows(2) {
            let ordered = w[0].score > w[1].score || (w[0].score == w[1].score && w[0].index < w[1].index);
            if !ordered {
                return Err(CurateError::Format(format!(
                    "entries {:?} and {:?} violate the ranking order",
                    w[0].id, w[1].id
                )));
            }
        }
        Ok(ScoreTable { entries })
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scores indexed by original record position.
    pub fn scores_by_index(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.entries.len()];
        for e in &self.entries {
            out[e.index] = e.score;
        }
        out
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub(crate) fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps ascending index among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// The ε of the closeness condition and its score threshold `1 − ε²/8`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremProbe {
    pub epsilon: f64,
    pub threshold: f64,
}

impl TheoremProbe {
    pub fn new(epsilon: f64) -> Result<Self> {
        Ok(TheoremProbe {
            epsilon,
            threshold: theorem_threshold(epsilon)?,
        })
    }

    /// Whether a score clears the threshold.
    pub fn admits(&self, score: f64) -> bool {
        score >= self.threshold
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn degenerate(which: &str) -> CurateError {
    CurateError::DegenerateFeature(format!("{which} feature has zero norm"))
}

/// Cosine similarity between the two proxies' features of one record.
pub fn cfs_score(f_source: &[f64], f_target: &[f64]) -> Result<f64> {
    if f_source.len() != f_target.len() {
        return Err(CurateError::Dimension(format!(
            "feature lengths {} and {} differ",
            f_source.len(),
            f_target.len()
        )));
    }
    let ns = norm(f_source);
    let nt = norm(f_target);
    if ns == 0.0 {
        return Err(degenerate("source"));
    }
    if nt == 0.0 {
        return Err(degenerate("target"));
    }
    let dot: f64 = f_source.iter().zip(f_target).map(|(a, b)| a * b).sum();
    Ok(dot / (ns * nt))
}

/// Scores every record of the source corpus under both proxies and ranks them.
pub fn score_corpus(source_by_proxy_s: &EmbeddingSet, source_by_proxy_t: &EmbeddingSet) -> Result<ScoreTable> {
    if source_by_proxy_s.ids() != source_by_proxy_t.ids() {
        let first = source_by_proxy_s
            .ids()
            .iter()
            .zip(source_by_proxy_t.ids())
            .position(|(a, b)| a != b);
        return Err(CurateError::Alignment(match first {
            Some(i) => format!(
                "record {i}: {:?} vs {:?}",
                source_by_proxy_s.ids()[i],
                source_by_proxy_t.ids()[i]
            ),
            None => format!(
                "{} vs {} records",
                source_by_proxy_s.len(),
                source_by_proxy_t.len()
            ),
        }));
    }
    if source_by_proxy_s.dim() != source_by_proxy_t.dim() {
        return Err(CurateError::Dimension(format!(
            "proxy feature dims {} and {} differ",
            source_by_proxy_s.dim(),
            source_by_proxy_t.dim()
        )));
    }
    let scores: Vec<f64> = (0..source_by_proxy_s.len())
        .into_par_iter()
        .map(|i| {
            cfs_score(source_by_proxy_s.row(i), source_by_proxy_t.row(i)).map_err(|_| {
                CurateError::DegenerateFeature(format!(
                    "record {:?} has a zero-norm feature",
                    source_by_proxy_s.ids()[i]
                ))
            })
        })
        .collect::<Result<_>>()?;
    ScoreTable::from_scores(source_by_proxy_s.ids(), &scores)
}

/// The `n_prime` highest-ranked ids, in rank order.
pub fn filter_top(scores: &ScoreTable, n_prime: usize) -> Result<Vec<String>> {
    if n_prime > scores.len() {
        return Err(CurateError::Range(format!(
            "N' = {n_prime} exceeds corpus size {}",
            scores.len()
        )));
    }
    Ok(scores.entries()[..n_prime].iter().map(|e| e.id.clone()).collect())
}

/// `floor(ratio·N)` for a ratio in `(0, 1]`.
pub fn count_for_ratio(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CurateError::Range(format!("ratio {ratio} outside (0, 1]")));
    }
    Ok((ratio * n as f64).floor() as usize)
}

/// `1 − ε²/8` for `ε ∈ (0, 1)`.
pub fn theorem_threshold(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(CurateError::Range(format!("epsilon {epsilon} outside (0, 1)")));
    }
    Ok(1.0 - epsilon * epsilon / 8.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceIdentity {
    /// Cosine score.
    pub score: f64,
    /// Distance between the unit-normalized features.
    pub distance: f64,
    /// `|d² − (2 − 2c)|`.
    pub residual: f64,
}

/// Evaluates both sides of `d² = 2 − 2c` through independent routes.
pub fn check_distance_identity(f_source: &[f64], f_target: &[f64]) -> Result<DistanceIdentity> {
    let score = cfs_score(f_source, f_target)?;
    let ns = norm(f_source);
    let nt = norm(f_target);
    let distance = f_target
        .iter()
        .zip(f_source)
        .map(|(t, s)| (t / nt - s / ns).powi(2))
        .sum::<f64>()
        .sqrt();
    let residual = (distance * distance - (2.0 - 2.0 * score)).abs();
    Ok(DistanceIdentity {
        score,
        distance,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    #[test]
    fn cfs_score_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cfs_score(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cfs_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cfs_score(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cfs_score(&[0.0, 0.0], &[1.0, 0.0]),
            Err(CurateError::DegenerateFeature(_))
        ));
    }

    #[test]
    fn embedding_set_rejects_duplicates_and_bad_lengths() {
        assert!(EmbeddingSet::new(vec!["a".into(), "a".into()], 1, vec![1.0, 2.0]).is_err());
        assert!(EmbeddingSet::new(ids(2), 2, vec![1.0; 3]).is_err());
        assert!(EmbeddingSet::new(ids(1), 1, vec![f64::NAN]).is_err());
        assert!(EmbeddingSet::new(vec![], 4, vec![]).unwrap().is_empty());
    }

    #[test]
    fn identical_proxies_score_one() {
        let s = EmbeddingSet::from_rows(ids(3), &[vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]]).unwrap();
        let t = score_corpus(&s, &s).unwrap();
        for (pos, e) in t.entries().iter().enumerate() {
            assert!((e.score - 1.0).abs() < 1e-12);
            assert_eq!(e.rank, pos + 1);
        }
    }

    /// Builds target rows at a chosen angle from e₀ so the cosines are known.
    fn with_scores(scores: &[f64]) -> (EmbeddingSet, EmbeddingSet) {
        let n = scores.len();
        let src: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, 0.0]).collect();
        let tgt: Vec<Vec<f64>> = scores.iter().map(|&c| vec![c, (1.0 - c * c).sqrt()]).collect();
        (
            EmbeddingSet::from_rows(ids(n), &src).unwrap(),
            EmbeddingSet::from_rows(ids(n), &tgt).unwrap(),
        )
    }

    #[test]
    fn ranks_follow_descending_scores() {
        let (s, t) = with_scores(&[0.9, 0.5, 0.7]);
        let table = score_corpus(&s, &t).unwrap();
        let ranks: Vec<usize> = {
            let mut r = vec![0; 3];
            for e in table.entries() {
                r[e.index] = e.rank;
            }
            r
        };
        assert_eq!(ranks, vec![1, 3, 2]);
        assert_eq!(filter_top(&table, 2).unwrap(), vec!["r0", "r2"]);
        assert!(filter_top(&table, 0).unwrap().is_empty());
        assert!(matches!(filter_top(&table, 4), Err(CurateError::Range(_))));
    }

    #[test]
    fn single_record_ranks_first() {
        let (s, t) = with_scores(&[-0.3]);
        let table = score_corpus(&s, &t).unwrap();
        assert_eq!(table.entries()[0].rank, 1);
    }

    #[test]
    fn ties_break_by_index() {
        let table = ScoreTable::from_scores(&ids(2), &[0.5, 0.5]).unwrap();
        assert_eq!(filter_top(&table, 1).unwrap(), vec!["r0"]);
        assert_eq!(ScoreTable::from_entries(table.entries().to_vec()).unwrap(), table);
    }

    #[test]
    fn from_entries_rejects_misordered_tables() {
        let mut entries = ScoreTable::from_scores(&ids(2), &[0.9, 0.1]).unwrap().entries().to_vec();
        entries[0].score = 0.0;
        assert!(ScoreTable::from_entries(entries).is_err());
    }

    #[test]
    fn alignment_and_degenerate_errors() {
        let a = EmbeddingSet::from_rows(ids(2), &[vec![1.0], vec![2.0]]).unwrap();
        let b = EmbeddingSet::from_rows(vec!["r0".into(), "x".into()], &[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(score_corpus(&a, &b), Err(CurateError::Alignment(_))));
        let z = EmbeddingSet::from_rows(ids(2), &[vec![1.0], vec![0.0]]).unwrap();
        match score_corpus(&a, &z) {
            Err(CurateError::DegenerateFeature(msg)) => assert!(msg.contains("r1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn threshold_examples() {
        assert!((theorem_threshold(0.4).unwrap() - 0.98).abs() < 1e-15);
        assert!((theorem_threshold(1e-9).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(theorem_threshold(1.0), Err(CurateError::Range(_))));
        assert!(theorem_threshold(0.0).is_err());
        let probe = TheoremProbe::new(0.5).unwrap();
        assert!(probe.threshold > 0.875 && probe.threshold < 1.0);
        assert!(probe.admits(0.99));
    }

    #[test]
    fn distance_identity_examples() {
        let same = check_distance_identity(&[2.0, 1.0], &[4.0, 2.0]).unwrap();
        assert!((same.score - 1.0).abs() < 1e-15);
        assert!(same.distance < 1e-7);
        let orth = check_distance_identity(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(orth.score, 0.0);
        assert!((orth.distance - 2f64.sqrt()).abs() < 1e-15);
        let anti = check_distance_identity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert_eq!(anti.score, -1.0);
        assert!((anti.distance - 2.0).abs() < 1e-15);
        assert!(anti.residual <= 1e-10);
    }

    #[test]
    fn ratio_counts_floor() {
        assert_eq!(count_for_ratio(10, 0.5).unwrap(), 5);
        assert_eq!(count_for_ratio(7, 0.5).unwrap(), 3);
        assert!(count_for_ratio(7, 0.0).is_err());
        assert!(count_for_ratio(7, 1.5).is_err());
    }
}
