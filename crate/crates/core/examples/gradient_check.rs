//! Finite-difference check of the full model backward pass for each stem.
//!
//! ```sh
//! cargo run --release --example gradient_check -- [coords_per_tensor]
//! ```

use std::time::Instant;

use cfs_curate::gradcheck::{check_model_gradients, perturb_params, GradCheckOptions};
use cfs_curate::stems::{StemConfig, StemVariant};
use cfs_curate::tensor::Tensor;
use cfs_curate::vit::{init_params, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cfs_curate::Result<()> {
    let mut options = GradCheckOptions::default();
    if let Some(n) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        options.per_tensor = n;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let images = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let weights = Tensor::from_fn(&[2, 32], |_| rng.random_range(-1.0..1.0));

    for variant in [StemVariant::Patchify, StemVariant::Conv, StemVariant::Ics] {
        let config = ViTConfig::new(StemConfig::for_variant(variant, 16, 32)?, 2, 2, 32, 32);
        let mut params = init_params(1, &config)?;
        perturb_params(&mut params, 2, 0.1);
        let start = Instant::now();
        let report = check_model_gradients(&config, &params, &images, &weights, &options)?;
        println!("{variant:?}: max relative error {:.2e} in {:.1}s", report.max_rel_error, start.elapsed().as_secs_f64());
        for t in report.tensors.iter().filter(|t| t.max_rel_error > 1e-5) {
            println!("  {:<24} {:.2e} over {} coords", t.name, t.max_rel_error, t.checked);
        }
    }
    Ok(())
}
