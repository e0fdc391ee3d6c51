//! Fixtures shared by the lattice benchmarks.

use std::sync::Arc;

use kpzlab::grid::GridSpec;
use kpzlab::noise::{build_covariance, NoiseField};

/// Noise on the desk grid (d = 3, N = 32, L = 16, dt = 0.05, kappa = 2.5) at the given eps values.
pub fn desk_noise(epsilons: &[f64]) -> Arc<NoiseField> {
    let grid = GridSpec::new(3, 32, 16.0, 0.05).expect("desk grid is valid");
    let model = build_covariance(&grid, 2.5, 1.0).expect("desk covariance builds");
    Arc::new(NoiseField::new(&model, epsilons).expect("noise plans build"))
}
