//! Shared fixtures for the benchmarks.

use acgibbs::gibbs_sampler::SamplerConfig;
use acgibbs::{Grid, Path, Potential};

/// The desk-scale domain used by most experiments: `[-5, 5]` at `dx = 0.05`.
pub fn desk_grid() -> Grid {
    Grid::symmetric(5.0, 0.05).expect("valid grid")
}

/// A single-layer sampler config on [`desk_grid`].
pub fn layer_sampler(epsilon: f64, sweeps: usize) -> SamplerConfig {
    SamplerConfig::new(desk_grid(), -1.0, 1.0, epsilon, sweeps, 42)
}

/// `tanh(x/√2)`, the one-layer minimizer, on `grid`.
pub fn profile_path(grid: Grid) -> Path {
    Path::from_fn(grid, |x| (x / std::f64::consts::SQRT_2).tanh())
}

pub fn quartic() -> Potential {
    Potential::quartic()
}
