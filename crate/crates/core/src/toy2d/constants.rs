//! Pinned generator and estimator constants for the 2-D suite.

use std::f64::consts::PI;

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
pub const EIGHT_GAUSSIANS_NOISE: f64 = 0.2;

/// Archimedean spiral `r = SPIRAL_RATE·θ` for `θ ∈ [0, SPIRAL_THETA_MAX]`.
pub const SPIRAL_THETA_MAX: f64 = 3.0 * PI;
pub const SPIRAL_RATE: f64 = 4.0 / (3.0 * PI);
pub const SPIRAL_NOISE: f64 = 0.1;

/// Cells per axis on `[−CHECKER_HALF_WIDTH, CHECKER_HALF_WIDTH]²`; cell
/// `(i, j)` is occupied when `i + j` is even.
pub const CHECKER_CELLS: usize = 4;
pub const CHECKER_HALF_WIDTH: f64 = 4.0;

pub const RING_RADII: [f64; 4] = [0.8, 1.6, 2.4, 3.2];
pub const RING_JITTER: f64 = 0.08;

pub const GRID_HALF_WIDTH: f64 = 4.5;
pub const GRID_BINS: usize = 100;
pub const SMOOTHING_EPS: f64 = 1e-10;

pub const PROTOCOL_ITERATIONS: usize = 30_000;
pub const PROTOCOL_SAMPLES: usize = 5_000;
