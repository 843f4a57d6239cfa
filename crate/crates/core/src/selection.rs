//! Selection strategies compared at equal budget: uniform random sampling,
//! closeness to target cluster centers, and CFS ranking.
//!
//! Fine-tuning accuracy is out of reach at this scale, so each strategy is
//! judged by two proxies computed on its selection: the mean CFS and the mean
//! nearest-target cosine (each selected record's best cosine against the
//! target features, averaged).

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfs::{cfs_score, count_for_ratio, filter_top, rank_order, score_corpus, EmbeddingSet};
use crate::error::{CurateError, Result};

pub const DEFAULT_CLUSTERS: usize = 16;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Cluster,
    Cfs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub ratio: f64,
    pub seed: u64,
    /// Cluster count, used by [`Strategy::Cluster`] only.
    pub k: usize,
}

impl SelectionConfig {
    pub fn new(strategy: Strategy, ratio: f64, seed: u64) -> Self {
        SelectionConfig {
            strategy,
            ratio,
            seed,
            k: DEFAULT_CLUSTERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub config: SelectionConfig,
    pub selected: Vec<String>,
    pub mean_cfs: f64,
    pub mean_nearest_target_cosine: f64,
    /// Selection mean minus the full-corpus mean.
    pub delta_mean_cfs: f64,
    pub delta_nearest_target_cosine: f64,
}

fn selection_size(n: usize, ratio: f64) -> Result<usize> {
    let m = count_for_ratio(n, ratio)?;
    if m == 0 {
        return Err(CurateError::Range(format!(
            "ratio {ratio} of {n} records selects nothing"
        )));
    }
    Ok(m)
}

/// Uniform sample without replacement of `floor(ratio·N)` ids, returned in
/// ascending order. The draw is made over the sorted ids, so input order does
/// not matter.
pub fn select_random(ids: &[String], ratio: f64, seed: u64) -> Result<Vec<String>> {
    if ids.is_empty() {
        return Err(CurateError::Range("cannot sample from an empty corpus".into()));
    }
    let m = selection_size(ids.len(), ratio)?;
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(CurateError::Alignment("duplicate ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut picked: Vec<String> = sorted.into_iter().take(m).collect();
    picked.sort();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centers: Vec<f64>,
    /// Sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.dim..(j + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from a seeded k-means++ start. Stops after `max_iter`
/// updates or once no center moves by `tol` or more. Empty clusters keep their
/// previous center.
pub fn kmeans_fit(features: &[f64], dim: usize, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansFit> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(CurateError::Dimension(format!(
            "{} values do not form rows of dim {dim}",
            features.len()
        )));
    }
    let n = features.len() / dim;
    if k == 0 || k > n {
        return Err(CurateError::Range(format!("k = {k} outside 1..={n}")));
    }
    let point = |i: usize| &features[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every point coincides with a center; take the first unused index.
            (0..n).find(|i| !chosen.contains(i)).expect("k ≤ n")
        };
        chosen.push(next);
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(point(i), point(next)));
        }
    }
    let mut centers: Vec<f64> = chosen.iter().flat_map(|&i| point(i).to_vec()).collect();

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut assign = vec![0usize; n];
    loop {
        let mut objective = 0.0;
        for (i, a) in assign.iter_mut().enumerate() {
            let (best, d) = (0..k)
                .map(|j| (j, sq_dist(point(i), &centers[j * dim..(j + 1) * dim])))
                .fold((0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
            *a = best;
            objective += d;
        }
        history.push(objective);
        if iterations >= max_iter {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let old = &mut centers[j * dim..(j + 1) * dim];
            let mut moved = 0.0;
            for (c, s) in old.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                let new = s / counts[j] as f64;
                moved += (new - *c) * (new - *c);
                *c = new;
            }
            shift = shift.max(moved.sqrt());
        }
        iterations += 1;
        if shift < tol {
            // Record the objective for the final centers.
            let objective = (0..n)
                .map(|i| (0..k).map(|j| sq_dist(point(i), &centers[j * dim..(j + 1) * dim])).fold(f64::INFINITY, f64::min))
                .sum();
            history.push(objective);
            break;
        }
    }
    Ok(KMeansFit {
        k,
        dim,
        centers,
        objective_history: history,
        iterations,
    })
}

/// Best cosine of each source row against a set of reference rows.
fn best_cosines(source: &EmbeddingSet, reference: &[f64], dim: usize) -> Result<Vec<f64>> {
    let refs: Vec<&[f64]> = reference.chunks(dim).collect();
    source
        .rows()
        .enumerate()
        .map(|(i, row)| {
            refs.iter()
                .map(|r| cfs_score(row, r))
                .try_fold(f64::NEG_INFINITY, |acc, c| c.map(|c| acc.max(c)))
                .map_err(|e| match e {
                    CurateError::DegenerateFeature(_) => CurateError::DegenerateFeature(format!(
                        "record {:?} or a reference row has zero norm",
                        source.ids()[i]
                    )),
                    other => other,
                })
        })
        .collect()
}

/// Fits k-means on the target features, scores each source record by its best
/// cosine to any center and keeps the top `floor(ratio·N)` in rank order.
pub fn select_cluster(source: &EmbeddingSet, target: &EmbeddingSet, k: usize, ratio: f64, seed: u64) -> Result<Vec<String>> {
    if source.dim() != target.dim() {
        return Err(CurateError::Dimension("source and target dims differ".into()));
    }
    let m = selection_size(source.len(), ratio)?;
    let fit = kmeans_fit(target.features(), target.dim(), k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let scores = best_cosines(source, &fit.centers, fit.dim)?;
    Ok(rank_order(&scores)
        .into_iter()
        .take(m)
        .map(|i| source.ids()[i].clone())
        .collect())
}

fn mean_at(values: &[f64], picks: &[usize]) -> f64 {
    picks.iter().map(|&i| values[i]).sum::<f64>() / picks.len() as f64
}

/// Runs every configured strategy on one aligned corpus. `target` holds target
/// images embedded by the source proxy, the same space as `source_by_proxy_s`.
pub fn compare_strategies(
    source_by_proxy_s: &EmbeddingSet,
    source_by_proxy_t: &EmbeddingSet,
    target: &EmbeddingSet,
    configs: &[SelectionConfig],
) -> Result<Vec<SelectionReport>> {
    let table = score_corpus(source_by_proxy_s, source_by_proxy_t)?;
    let cfs = table.scores_by_index();
    if target.is_empty() {
        return Err(CurateError::Range("target set is empty".into()));
    }
    if target.dim() != source_by_proxy_s.dim() {
        return Err(CurateError::Dimension("target dim differs from source dim".into()));
    }
    let nearest = best_cosines(source_by_proxy_s, target.features(), target.dim())?;
    let all: Vec<usize> = (0..cfs.len()).collect();
    let full_cfs = mean_at(&cfs, &all);
    let full_nearest = mean_at(&nearest, &all);
    let ids = source_by_proxy_s.ids();
    let index_of: std::collections::HashMap<&str, usize> =
        ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    configs
        .iter()
        .map(|config| {
            let selected = match config.strategy {
                Strategy::Random => select_random(ids, config.ratio, config.seed)?,
                Strategy::Cluster => select_cluster(source_by_proxy_s, target, config.k, config.ratio, config.seed)?,
                Strategy::Cfs => filter_top(&table, selection_size(ids.len(), config.ratio)?)?,
            };
            let picks: Vec<usize> = selected.iter().map(|id| index_of[id.as_str()]).collect();
            let mean_cfs = mean_at(&cfs, &picks);
            let mean_nearest = mean_at(&nearest, &picks);
            Ok(SelectionReport {
                config: config.clone(),
                selected,
                mean_cfs,
                mean_nearest_target_cosine: mean_nearest,
                delta_mean_cfs: mean_cfs - full_cfs,
                delta_nearest_target_cosine: mean_nearest - full_nearest,
            })
        })
        .collect()
}

/// Linear stand-in for a target-fine-tuned proxy: features are pulled onto the
/// target's principal subspace around the target mean, `μ + U·Uᵀ·(f − μ)`.
/// Records whose features already lie near that affine subspace barely move and
/// keep a high CFS; records far from it are changed the most.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSubspaceProxy {
    mean: Vec<f64>,
    /// `dim × rank`, column-major basis.
    basis: DMatrix<f64>,
}

impl TargetSubspaceProxy {
    pub fn fit(target: &EmbeddingSet, rank: usize) -> Result<Self> {
        let (n, d) = (target.len(), target.dim());
        if n < 2 {
            return Err(CurateError::Range("need at least two target records".into()));
        }
        if rank == 0 || rank > d {
            return Err(CurateError::Range(format!("rank {rank} outside 1..={d}")));
        }
        let mut mean = vec![0.0; d];
        for row in target.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let centered = DMatrix::from_fn(n, d, |i, j| target.row(i)[j] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let basis = DMatrix::from_fn(d, rank, |i, j| eig.eigenvectors[(i, order[j])]);
        Ok(TargetSubspaceProxy { mean, basis })
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        let centered = nalgebra::DVector::from_fn(d, |i, _| f[i] - self.mean[i]);
        let coords = self.basis.transpose() * centered;
        let proj = &self.basis * coords;
        (0..d).map(|i| self.mean[i] + proj[i]).collect()
    }

    pub fn apply_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.mean.len() {
            return Err(CurateError::Dimension("proxy dim differs from set dim".into()));
        }
        let features = set.rows().flat_map(|r| self.apply(r)).collect();
        EmbeddingSet::new(set.ids().to_vec(), set.dim(), features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:02}")).collect()
    }

    #[test]
    fn random_selection_basics() {
        let all = ids(10);
        assert_eq!(select_random(&all, 1.0, 3).unwrap(), all);
        let a = select_random(&all, 0.5, 7).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, select_random(&all, 0.5, 7).unwrap());
        let mut reversed = all.clone();
        reversed.reverse();
        assert_eq!(a, select_random(&reversed, 0.5, 7).unwrap());
        assert!(matches!(select_random(&[], 0.5, 1), Err(CurateError::Range(_))));
        assert!(select_random(&all, 0.05, 1).is_err());
    }

    #[test]
    fn kmeans_single_point() {
        let fit = kmeans_fit(&[1.5, -2.0], 2, 1, 0, 10, 1e-9).unwrap();
        assert_eq!(fit.centers, vec![1.5, -2.0]);
    }

    #[test]
    fn kmeans_separated_blobs_recover_means() {
        let pts = [0.0, 0.2, 0.4, 10.0, 10.5, 11.0, 11.5];
        let fit = kmeans_fit(&pts, 1, 2, 4, 100, 1e-12).unwrap();
        let mut c = fit.centers.clone();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.2).abs() < 1e-12);
        assert!((c[1] - 10.75).abs() < 1e-12);
    }

    #[test]
    fn kmeans_with_k_equal_n_returns_points() {
        let pts = [0.0, 1.0, 5.0, 2.0, -3.0, 4.0];
        let fit = kmeans_fit(&pts, 2, 3, 9, 50, 1e-12).unwrap();
        let mut got: Vec<Vec<f64>> = (0..3).map(|j| fit.center(j).to_vec()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, vec![vec![-3.0, 4.0], vec![0.0, 1.0], vec![5.0, 2.0]]);
        assert!(matches!(kmeans_fit(&pts, 2, 4, 0, 5, 1e-6), Err(CurateError::Range(_))));
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = kmeans_fit(&pts, 3, 6, 1, 100, 0.0).unwrap();
        for w in fit.objective_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{w:?}");
        }
    }

    #[test]
    fn cluster_selection_ranks_by_center_cosine() {
        // One target direction; sources at known angles.
        let target = EmbeddingSet::from_rows(ids(1), &[vec![1.0, 0.0]]).unwrap();
        let src = EmbeddingSet::from_rows(
            ids(4),
            &[vec![0.0, 1.0], vec![1.0, 0.1], vec![1.0, 0.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let picked = select_cluster(&src, &target, 1, 0.5, 0).unwrap();
        assert_eq!(picked, vec!["id02", "id01"]);
        assert_eq!(select_cluster(&src, &target, 1, 1.0, 0).unwrap().len(), 4);
    }

    #[test]
    fn ratio_one_gives_identical_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let s = EmbeddingSet::from_rows(ids(20), &rows(20, &mut rng)).unwrap();
        let t = EmbeddingSet::from_rows(ids(20), &rows(20, &mut rng)).unwrap();
        let tgt = EmbeddingSet::from_rows(ids(8), &rows(8, &mut rng)).unwrap();
        let configs: Vec<SelectionConfig> = [Strategy::Random, Strategy::Cluster, Strategy::Cfs]
            .into_iter()
            .map(|st| SelectionConfig { k: 3, ..SelectionConfig::new(st, 1.0, 2) })
            .collect();
        let reports = compare_strategies(&s, &t, &tgt, &configs).unwrap();
        for r in &reports[1..] {
            assert!((r.mean_cfs - reports[0].mean_cfs).abs() < 1e-12);
            assert!((r.mean_nearest_target_cosine - reports[0].mean_nearest_target_cosine).abs() < 1e-12);
            assert!(r.delta_mean_cfs.abs() < 1e-12);
        }
        let half: Vec<SelectionConfig> = configs.iter().map(|c| SelectionConfig { ratio: 0.5, ..c.clone() }).collect();
        let reports = compare_strategies(&s, &t, &tgt, &half).unwrap();
        for r in &reports {
            assert_eq!(r.selected.len(), 10);
        }
        assert!(reports[2].mean_cfs >= reports[0].mean_cfs);
        assert!(reports[2].mean_cfs >= reports[1].mean_cfs);
    }

    #[test]
    fn subspace_proxy_fixes_points_on_the_subspace() {
        let target = EmbeddingSet::from_rows(
            ids(4),
            &[vec![1.0, 0.0, 5.0], vec![-1.0, 0.0, 5.0], vec![2.0, 0.0, 5.0], vec![-2.0, 0.0, 5.0]],
        )
        .unwrap();
        let proxy = TargetSubspaceProxy::fit(&target, 1).unwrap();
        let on = proxy.apply(&[3.0, 0.0, 5.0]);
        for (a, b) in on.iter().zip([3.0, 0.0, 5.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let off = proxy.apply(&[3.0, 4.0, 1.0]);
        for (a, b) in off.iter().zip([3.0, 0.0, 5.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(TargetSubspaceProxy::fit(&target, 4).is_err());
    }
}
