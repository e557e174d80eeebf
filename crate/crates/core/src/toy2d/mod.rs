//! Two-dimensional validation suite: dataset generators, ODE sampling from a
//! trained model, and histogram KL/JSD between point sets.

pub mod constants;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{self, OdeConfig};
use crate::score_net::{ScoreFn, ScoreNetConfig};
use crate::sde::SdeSpec;
use crate::seed;
use crate::trainer::Normalizer;
use constants::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyName {
    EightGaussians,
    Spiral,
    Checkerboard,
    Rings,
}

impl ToyName {
    pub const ALL: [ToyName; 4] = [
        ToyName::EightGaussians,
        ToyName::Spiral,
        ToyName::Checkerboard,
        ToyName::Rings,
    ];

    /// Noise level of the generator; `None` for the noiseless checkerboard.
    pub fn default_noise(self) -> Option<f64> {
        match self {
            ToyName::EightGaussians => Some(EIGHT_GAUSSIANS_NOISE),
            ToyName::Spiral => Some(SPIRAL_NOISE),
            ToyName::Checkerboard => None,
            ToyName::Rings => Some(RING_JITTER),
        }
    }
}

impl fmt::Display for ToyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyName::EightGaussians => "eight_gaussians",
            ToyName::Spiral => "spiral",
            ToyName::Checkerboard => "checkerboard",
            ToyName::Rings => "rings",
        })
    }
}

impl FromStr for ToyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "eight_gaussians" | "8gaussians" | "8_gaussians" => Ok(ToyName::EightGaussians),
            "spiral" => Ok(ToyName::Spiral),
            "checkerboard" => Ok(ToyName::Checkerboard),
            "rings" => Ok(ToyName::Rings),
            other => Err(Error::Config(format!("unknown toy dataset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub name: ToyName,
    pub points: Array2<f64>,
}

pub fn sample_toy(name: ToyName, n: usize, seed: u64) -> Result<ToyDataset> {
    sample_toy_with_noise(name, n, seed, name.default_noise().unwrap_or(0.0))
}

/// Like [`sample_toy`] with the generator's noise scale overridden.
pub fn sample_toy_with_noise(name: ToyName, n: usize, seed: u64, noise: f64) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one point".into()));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::InvalidInput(
            "noise must be finite and nonnegative".into(),
        ));
    }
    let mut rng = seed::rng(seed::child(seed, seed::Stream::Data));
    let mut points = Array2::zeros((n, 2));
    for mut row in points.rows_mut() {
        let (x, y) = match name {
            ToyName::EightGaussians => {
                let k = rng.random_range(0..8) as f64;
                let a = k * PI / 4.0;
                let (gx, gy): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                (
                    EIGHT_GAUSSIANS_RADIUS * a.cos() + noise * gx,
                    EIGHT_GAUSSIANS_RADIUS * a.sin() + noise * gy,
                )
            }
            ToyName::Spiral => {
                let theta = rng.random::<f64>() * SPIRAL_THETA_MAX;
                let g: f64 = rng.sample(StandardNormal);
                let r = SPIRAL_RATE * theta + noise * g;
                (r * theta.cos(), r * theta.sin())
            }
            ToyName::Checkerboard => {
                // Eight occupied cells; index them as (row, column) with i + j even.
                let cell = rng.random_range(0..CHECKER_CELLS * CHECKER_CELLS / 2);
                let i = cell / (CHECKER_CELLS / 2);
                let j = 2 * (cell % (CHECKER_CELLS / 2)) + (i % 2);
                let w = 2.0 * CHECKER_HALF_WIDTH / CHECKER_CELLS as f64;
                (
                    -CHECKER_HALF_WIDTH + w * (j as f64 + rng.random::<f64>()),
                    -CHECKER_HALF_WIDTH + w * (i as f64 + rng.random::<f64>()),
                )
            }
            ToyName::Rings => {
                let radius = RING_RADII[rng.random_range(0..RING_RADII.len())];
                let a = rng.random::<f64>() * 2.0 * PI;
                let g: f64 = rng.sample(StandardNormal);
                let r = radius + noise * g;
                (r * a.cos(), r * a.sin())
            }
        };
        row[0] = x;
        row[1] = y;
    }
    Ok(ToyDataset { name, points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramGrid {
    pub half_width: f64,
    pub bins_per_axis: usize,
    pub counts: Array2<u64>,
}

impl Default for HistogramGrid {
    fn default() -> Self {
        Self::new(GRID_HALF_WIDTH, GRID_BINS).expect("default grid is valid")
    }
}

impl HistogramGrid {
    pub fn new(half_width: f64, bins_per_axis: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) || bins_per_axis == 0 {
            return Err(Error::InvalidInput(
                "grid needs positive extent and bins".into(),
            ));
        }
        Ok(Self {
            half_width,
            bins_per_axis,
            counts: Array2::zeros((bins_per_axis, bins_per_axis)),
        })
    }

    fn bin(&self, v: f64) -> usize {
        let u = (v + self.half_width) / (2.0 * self.half_width) * self.bins_per_axis as f64;
        // Out-of-range points land in the edge bins.
        (u.floor().max(0.0) as usize).min(self.bins_per_axis - 1)
    }

    /// A fresh grid with the same geometry, filled with `points`.
    pub fn fill(&self, points: ArrayView2<f64>) -> Result<Self> {
        if points.ncols() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: points.ncols(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("histogram points".into()));
        }
        let mut out = Self::new(self.half_width, self.bins_per_axis)?;
        for r in points.rows() {
            out.counts[[self.bin(r[0]), self.bin(r[1])]] += 1;
        }
        Ok(out)
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Bin probabilities with `eps` added to each bin before renormalizing.
    pub fn probabilities(&self, eps: f64) -> Vec<f64> {
        let n = self.total() as f64;
        let raw: Vec<f64> = self.counts.iter().map(|&c| c as f64 / n + eps).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / z).collect()
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `(KL(reference ‖ generated), JSD)` in nats on `grid`'s geometry.
pub fn kl_jsd(
    reference: ArrayView2<f64>,
    generated: ArrayView2<f64>,
    grid: &HistogramGrid,
) -> Result<(f64, f64)> {
    if reference.nrows() == 0 || generated.nrows() == 0 {
        return Err(Error::InvalidInput(
            "both point sets must be nonempty".into(),
        ));
    }
    let (hp, hq) = (grid.fill(reference)?, grid.fill(generated)?);
    let divergence = kl(
        &hp.probabilities(SMOOTHING_EPS),
        &hq.probabilities(SMOOTHING_EPS),
    );
    // The midpoint mixture is positive wherever either set is, so JSD needs no smoothing.
    let (p, q) = (hp.probabilities(0.0), hq.probabilities(0.0));
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    let jsd = (0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)).clamp(0.0, std::f64::consts::LN_2);
    Ok((divergence, jsd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub dataset: String,
    pub kl_nats: f64,
    pub jsd_nats: f64,
    pub n_ref: usize,
    pub n_gen: usize,
    pub seed: u64,
}

/// Draws `n` prior samples and integrates the flow from `t_max` down to
/// `t_min`, mapping back to data space. Failed solves are dropped.
pub fn ode_sample<S: ScoreFn + ?Sized>(
    score: &S,
    spec: &SdeSpec,
    normalizer: Option<&Normalizer>,
    n: usize,
    cfg: &OdeConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let d = score.input_dim();
    let prior_std = spec.prior_variance().sqrt();
    let root = seed::child(seed, seed::Stream::Sampling);
    let draws: Vec<Option<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(root, i as u64));
            let z1: Vec<f64> = (0..d)
                .map(|_| prior_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            match likelihood::integrate_flow(score, spec, &z1, cfg.t_max, cfg.t_min, cfg, None) {
                Ok((z0, _)) if z0.iter().all(|v| v.is_finite()) => {
                    Some(normalizer.map_or(z0.clone(), |nm| nm.denormalize(&z0)))
                }
                Ok(_) => {
                    log::warn!("sample {i}: non-finite endpoint, dropped");
                    None
                }
                Err(e) => {
                    log::warn!("sample {i}: {e}, dropped");
                    None
                }
            }
        })
        .collect();
    let kept: Vec<f64> = draws.into_iter().flatten().flatten().collect();
    let rows = kept.len() / d.max(1);
    Ok(Array2::from_shape_vec((rows, d), kept).expect("rows of length d"))
}

/// Score network used for the 2-D suite.
pub fn toy_net_config() -> ScoreNetConfig {
    ScoreNetConfig {
        input_dim: 2,
        hidden_dim: 64,
        num_blocks: 3,
        time_embed_dim: 16,
        class_embed_dim: 2,
        num_classes: None,
    }
}

/// Optimizer batch size used for the 2-D suite.
pub const TOY_BATCH_SIZE: usize = 256;
