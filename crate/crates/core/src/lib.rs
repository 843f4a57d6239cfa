//! Conditional pre-training data curation: proxy feature extraction with
//! patchify, convolution and IBN-style convolution stems, Catastrophic
//! Forgetting Score ranking, baseline selection strategies, CKA invariance
//! analysis and HΔH domain divergence.

pub mod cfs;
pub mod cka;
pub mod cli;
pub mod divergence;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod selection;
pub mod stems;
pub mod tensor;
pub mod vit;

pub use cfs::{cfs_score, filter_top, score_corpus, EmbeddingSet, ScoreTable};
pub use error::{CurateError, Result};
pub use image::Image;
