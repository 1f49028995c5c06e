//! Progressive unsupervised learning (PUL) over feature vectors.
//!
//! The engine alternates three steps on an unlabeled target set:
//! k-means clustering of the current embeddings, selection of the samples
//! that lie close to their cluster center, and classification fine-tuning
//! of the embedder on the selected pseudo-labeled samples. As the embedder
//! improves, more samples pass the reliability threshold, until the size of
//! the reliable set stops changing.
//!
//! Module map:
//! - [`types`]: datasets, models, cluster/selection state, configuration.
//! - [`embedder`]: forward pass, softmax head, backprop and SGD fine-tuning.
//! - [`clustering`]: k-means++ seeding and Lloyd iterations.
//! - [`selection`]: cosine-threshold reliable sample selection.
//! - [`pul`]: the outer loop, convergence rule and semi-supervised variant.
//! - [`evaluation`]: single-query CMC and mAP retrieval metrics.
//! - [`data_io`]: synthetic benchmark, dataset/model files, run history.
//! - [`config`]: key = value configuration files.

pub mod benchmark;
pub mod clustering;
pub mod config;
pub mod data_io;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod pul;
pub mod selection;
pub mod types;

pub use error::{PulError, Result};
pub use types::{
    Architecture, ClusterState, Dataset, Dense, EmbedModel, IterationRecord, PulConfig,
    PulRunState, SelectionMask,
};

/// Deterministic RNG used across the engine. ChaCha keeps seeded streams
/// identical across platforms.
pub type PulRng = rand_chacha::ChaCha8Rng;

/// Builds the engine RNG from a seed.
pub fn seeded_rng(seed: u64) -> PulRng {
    use rand::SeedableRng;
    PulRng::seed_from_u64(seed)
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    /// Original model training.
    Init = 1,
    /// The PUL loop.
    Run = 2,
}

pub fn stream_rng(seed: u64, stream: RngStream) -> PulRng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream as u64);
    rng
}
