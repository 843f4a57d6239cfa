//! Scores a small corpus, keeps the top half and reports which records fall
//! inside the ε-ball certified by the threshold.
//!
//! ```sh
//! cargo run --example score_and_filter -- [epsilon]
//! ```

use cfs_curate::cfs::{count_for_ratio, TheoremProbe};
use cfs_curate::{filter_top, score_corpus, EmbeddingSet};

fn main() -> cfs_curate::Result<()> {
    let epsilon: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let ids: Vec<String> = (0..8).map(|i| format!("img-{i}")).collect();
    let source: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, 0.5, i as f64 * 0.1]).collect();
    let target: Vec<Vec<f64>> = (0..8).map(|i| vec![1.0, 0.5 - i as f64 * 0.15, 0.2]).collect();

    let s = EmbeddingSet::from_rows(ids.clone(), &source)?;
    let t = EmbeddingSet::from_rows(ids, &target)?;
    let table = score_corpus(&s, &t)?;
    let probe = TheoremProbe::new(epsilon)?;
    println!("threshold {:.6} for epsilon {epsilon}", probe.threshold);
    for e in table.entries() {
        println!("{:>2}  {:<6} {:.6}  {}", e.rank, e.id, e.score, if probe.admits(e.score) { "within" } else { "outside" });
    }
    let kept = filter_top(&table, count_for_ratio(table.len(), 0.5)?)?;
    println!("kept: {}", kept.join(" "));
    Ok(())
}
