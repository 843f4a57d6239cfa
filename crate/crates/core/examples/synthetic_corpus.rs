//! Writes a synthetic source/target corpus, embeds it and stores the features
//! in the binary embedding format.
//!
//! ```sh
//! cargo run --example synthetic_corpus -- /tmp/corpus
//! ```

use std::path::PathBuf;

use cfs_curate::image::images_to_tensor;
use cfs_curate::io::{read_embeddings, synth_corpus, write_embeddings, write_image_ppm, DomainShift, SynthConfig};
use cfs_curate::stems::StemConfig;
use cfs_curate::vit::{embed_corpus, init_params, EncodeMode, ViTConfig};

fn main() -> cfs_curate::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "synthetic-corpus".into()).into();
    let corpus = synth_corpus(&SynthConfig::new(0, 20, 32, 32, DomainShift::default()))?;
    std::fs::create_dir_all(&out).expect("output directory");
    for (id, im) in corpus.source_ids.iter().zip(&corpus.source).take(4) {
        write_image_ppm(im, &out.join(format!("{id}.ppm")))?;
    }

    let config = ViTConfig::new(StemConfig::ics(16, 32)?, 2, 2, 32, 32);
    let params = init_params(0, &config)?;
    let set = embed_corpus(corpus.source_ids.clone(), &images_to_tensor(&corpus.source)?, &config, &params, EncodeMode::PerImage)?;
    let path = out.join("source.emb");
    write_embeddings(&set, &path)?;
    let back = read_embeddings(&path)?;
    println!("{} records of dim {} written to {}", back.len(), back.dim(), path.display());
    let mean = |images: &[cfs_curate::Image]| images.iter().map(|im| im.mean()).sum::<f64>() / images.len() as f64;
    println!("mean brightness: source {:.3}, target {:.3}", mean(&corpus.source), mean(&corpus.target));
    Ok(())
}
