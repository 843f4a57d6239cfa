//! HΔH distance between two Gaussian clouds as their means separate, with the
//! resulting excess-risk bound.

use cfs_curate::divergence::{build_stumps, erb_bound_terms, hdh_detail, BoundInputs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cloud(rng: &mut ChaCha8Rng, n: usize, mean: f64) -> Vec<Vec<f64>> {
    let normal = Normal::new(mean, 1.0).unwrap();
    (0..n).map(|_| vec![normal.sample(rng), normal.sample(rng)]).collect()
}

fn main() -> cfs_curate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 300;
    for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let u1 = cloud(&mut rng, n, 0.0);
        let u2 = cloud(&mut rng, n, shift);
        let pooled: Vec<Vec<f64>> = u1.iter().chain(&u2).cloned().collect();
        let class = build_stumps(&pooled, &[0, 1], 64)?;
        let detail = hdh_detail(&u1, &u2, &class)?;
        let terms = erb_bound_terms(&BoundInputs {
            d_hdh: detail.distance,
            f_hat_t: 0.1,
            f_t_star: 0.05,
            f_s_star: 0.05,
            vc_dim: 2,
            n: n as u64,
            delta: 0.05,
        })?;
        println!(
            "shift {shift:.1}: HΔH {:.3} via {:?} / {:?}, bound {:.3}",
            detail.distance, class.hypotheses[detail.h], class.hypotheses[detail.h_prime], terms.total
        );
    }
    Ok(())
}
