//! Volumetric registration and classification on anisotropic 3D volumes.
//!
//! The crate provides a dense rank-5 volume type with hand-derived
//! backward passes for every operator: an adaptive pyramid difference
//! convolution backbone, a coarse-to-fine displacement-field alignment
//! network with cross-attention, differentiable trilinear warping, the
//! loss stack (cross-entropy, windowed NCC, field smoothness), and an
//! AdamW optimizer. Everything is deterministic given a seed; gradients
//! are verified against central finite differences in the test suite.

pub mod abpdc;
pub mod attention;
pub mod backbone;
pub mod conv;
pub mod error;
pub mod fdcheck;
pub mod footprint;
pub mod fpran;
pub mod graph;
pub mod io;
pub mod loss;
pub mod model;
pub mod norm;
pub mod optim;
pub mod params;
pub mod rng;
pub mod volume;
pub mod warp;

pub use abpdc::{AbpdcMode, AbpdcParams};

/// Caps the worker-thread count of the internal data-parallel loops.
/// Results never depend on the thread count; this only bounds CPU use.
pub fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool already configured: {e}")))
}

pub use backbone::BackboneConfig;
pub use error::{Error, Result};
pub use footprint::PyramidFootprint;
pub use fpran::FpranConfig;
pub use graph::{Graph, Vid};
pub use model::{LossWeights, ModelConfig};
pub use optim::{AdamConfig, AdamW, StepDecay};
pub use params::ParamStore;
pub use rng::Rng;
pub use volume::Volume5;
pub use warp::{AffineMatrix, DisplacementField};
