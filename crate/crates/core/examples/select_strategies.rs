//! Random, cluster and CFS selection compared on a synthetic shifted corpus.
//!
//! Source features come from a randomly initialized ICS-stem encoder. The
//! target-adapted proxy is approximated by projecting onto the principal
//! subspace of the target features.
//!
//! ```sh
//! cargo run --release --example select_strategies -- [seed] [rank]
//! ```

use cfs_curate::image::images_to_tensor;
use cfs_curate::io::{synth_corpus, DomainShift, SynthConfig};
use cfs_curate::selection::{compare_strategies, SelectionConfig, Strategy, TargetSubspaceProxy};
use cfs_curate::stems::{StemConfig, StemVariant};
use cfs_curate::vit::{embed_corpus, init_params, EncodeMode, ViTConfig};

fn main() -> cfs_curate::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let rank: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);

    let corpus = synth_corpus(&SynthConfig::new(seed, 400, 32, 32, DomainShift::default()))?;
    let config = ViTConfig::new(StemConfig::for_variant(StemVariant::Ics, 16, 32)?, 2, 2, 32, 32);
    let params = init_params(seed, &config)?;

    let source = embed_corpus(corpus.source_ids.clone(), &images_to_tensor(&corpus.source)?, &config, &params, EncodeMode::PerImage)?;
    let target = embed_corpus(
        corpus.target_ids[..200].to_vec(),
        &images_to_tensor(&corpus.target[..200])?,
        &config,
        &params,
        EncodeMode::PerImage,
    )?;
    let adapted = TargetSubspaceProxy::fit(&target, rank)?.apply_set(&source)?;

    let configs: Vec<SelectionConfig> = [Strategy::Random, Strategy::Cluster, Strategy::Cfs]
        .into_iter()
        .map(|s| SelectionConfig::new(s, 0.5, seed))
        .collect();
    for r in compare_strategies(&source, &adapted, &target, &configs)? {
        println!(
            "{:<8} mean CFS {:.4} ({:+.4})  mean nearest-target cosine {:.4} ({:+.4})",
            format!("{:?}", r.config.strategy),
            r.mean_cfs,
            r.delta_mean_cfs,
            r.mean_nearest_target_cosine,
            r.delta_nearest_target_cosine
        );
    }
    Ok(())
}
