//! Feature invariance of conv and ICS stems under the six augmentations,
//! measured by linear CKA on a synthetic color-shifted corpus.
//!
//! ```sh
//! cargo run --release --example cka_invariance -- [trials] [images]
//! ```

use cfs_curate::cka::{invariance_report, AugmentKind, AugmentationSpec};
use cfs_curate::io::{synth_corpus, DomainShift, SynthConfig};
use cfs_curate::stems::{StemConfig, StemVariant};
use cfs_curate::vit::{init_params, ViTConfig};

fn main() -> cfs_curate::Result<()> {
    let mut args = std::env::args().skip(1);
    let trials: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    let specs: Vec<AugmentationSpec> = AugmentKind::ALL.into_iter().map(AugmentationSpec::with_default).collect();

    print!("{:<6} {:<9}", "trial", "stem");
    for s in &specs {
        print!(" {:>10}", s.kind.name());
    }
    println!();
    for trial in 0..trials {
        let corpus = synth_corpus(&SynthConfig::new(trial, n, 32, 32, DomainShift::default()))?;
        for variant in [StemVariant::Conv, StemVariant::Ics] {
            let config = ViTConfig::new(StemConfig::for_variant(variant, 16, 32)?, 2, 2, 32, 32);
            let params = init_params(100 + trial, &config)?;
            let report = invariance_report(&config, &params, &corpus.source, &specs, &format!("{variant:?}"), "synthetic")?;
            print!("{trial:<6} {:<9}", report.model);
            for row in &report.rows {
                print!(" {:>10.4}", row.cka);
            }
            println!();
        }
    }
    Ok(())
}
