//! Path-space sampling and energy analysis for the one-dimensional Allen-Cahn
//! invariant measure: a Brownian bridge reweighted by `exp(-(1/ε)∫V(u))`.

pub mod energy_min;
pub mod error;
pub mod experiments;
pub mod gaussian_bridge;
pub mod gibbs_sampler;
pub mod path_domain;
pub mod persistence;
pub mod potential;
mod quad;
pub mod reflections;
pub mod rng;
pub mod stats;
pub mod transfer_oracle;

pub use error::{Error, Result};
pub use path_domain::{Grid, Path};
pub use potential::Potential;
pub use rng::RandomSource;
