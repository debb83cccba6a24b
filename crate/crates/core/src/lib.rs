//! Exact score-based composition of diffusion models on Gaussian mixtures and
//! finite discrete spaces.
//!
//! The crate provides analytic mixture scores, the composition operator and its
//! closed forms, reverse-diffusion and Langevin samplers, Wasserstein and KL
//! diagnostics, and a catalog of reproducible experiments.

pub mod compose;
pub mod discrete;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod families;
pub mod gmm;
pub mod linalg;
pub mod samplers;
pub mod samples;
pub mod schedule;
pub mod stats;
pub mod transport;

pub use compose::{CompositionSpec, ComposedScore};
pub use discrete::{DiscreteDistribution, MaskPartition};
pub use error::{Error, Result};
pub use gmm::{GaussianMixture, LinearMap};
pub use samplers::{SamplerConfig, SamplerKind};
pub use samples::{Provenance, SampleSet};
pub use schedule::DiffusionSchedule;
