//! Runs the three stems on one image pair differing only by a brightness
//! offset and prints how far the tokens move.

use cfs_curate::cka::{augment, AugmentKind, AugmentationSpec};
use cfs_curate::image::images_to_tensor;
use cfs_curate::io::{synth_corpus, DomainShift, SynthConfig};
use cfs_curate::stems::{stem_forward_frozen, stem_statistics, StemConfig, StemParams, StemVariant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cfs_curate::Result<()> {
    let corpus = synth_corpus(&SynthConfig::new(1, 16, 32, 32, DomainShift::NONE))?;
    let brighter: Vec<_> = corpus
        .source
        .iter()
        .map(|im| augment(im, &AugmentationSpec::new(AugmentKind::Brightness, -0.2)))
        .collect::<cfs_curate::Result<_>>()?;
    let (x, y) = (images_to_tensor(&corpus.source)?, images_to_tensor(&brighter)?);

    for variant in [StemVariant::Patchify, StemVariant::Conv, StemVariant::Ics] {
        let config = StemConfig::for_variant(variant, 16, 32)?;
        let params = StemParams::init(&config, &mut ChaCha8Rng::seed_from_u64(7))?;
        let stats = stem_statistics(&x, &config, &params)?;
        let a = stem_forward_frozen(&x, &config, &params, &stats)?;
        let b = stem_forward_frozen(&y, &config, &params, &stats)?;
        let diff: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.data().iter().map(|p| p * p).sum::<f64>().sqrt();
        println!("{variant:?}: tokens {:?}, relative change {:.4}", a.shape(), diff / norm);
    }
    Ok(())
}
