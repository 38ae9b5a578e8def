//! Cluster-conditioned generative modeling without labels.
//!
//! The crate clusters precomputed embeddings (k-means or TEMI), estimates an
//! upper bound on the useful number of clusters from TEMI's cluster
//! utilization, trains a cluster-conditional EDM-style denoiser on
//! low-dimensional data, samples it with a deterministic Heun solver and
//! evaluates the result with Fréchet distance, adjusted mutual information,
//! Hungarian accuracy and nearest-neighbour AUROC.
//!
//! The accompanying guide in `book/` walks through each piece; its code
//! snippets are compiled and run as doctests of this crate.

mod codec;
pub mod bounds;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod kmeans;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod temi;

pub use dataset::{FeatureSet, NeighborSets, SyntheticSpec};
pub use error::{Error, Result};
pub use kmeans::{ClusterAssignment, Method};

/// Guide chapters, compiled so that their snippets run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/kmeans.md")]
    pub struct Kmeans;
    #[doc = include_str!("../../../book/src/temi.md")]
    pub struct Temi;
    #[doc = include_str!("../../../book/src/bounds.md")]
    pub struct Bounds;
    #[doc = include_str!("../../../book/src/diffusion.md")]
    pub struct Diffusion;
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub struct Metrics;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub struct Pipeline;
    #[doc = include_str!("../../../book/src/reproduce.md")]
    pub struct Reproduce;
}
