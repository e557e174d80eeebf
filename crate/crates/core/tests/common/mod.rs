//! Fixtures shared by the integration and acceptance tests.

#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use rdm::score_net::ScoreNetConfig;
use rdm::seed;

pub const TASK_DIM: usize = 8;
/// Dimensions carrying the mixture centers; the rest hold only unit noise.
pub const TASK_ACTIVE_DIMS: usize = 5;
pub const TASK_COMPONENTS: usize = 8;
pub const TASK_CENTER_SCALE: f64 = 5.0;
/// OOD shift in units of the component std, applied to every inactive dim.
pub const TASK_SHIFT: f64 = 4.0;
pub const TASK_TRAIN: usize = 40_960;
pub const TASK_EVAL: usize = 1_000;
const TASK_CENTER_SEED: u64 = 12_345;

pub struct SyntheticTask {
    pub train: Array2<f64>,
    pub id_eval: Array2<f64>,
    pub ood_eval: Array2<f64>,
}

fn task_centers() -> Array2<f64> {
    let mut rng = seed::rng(TASK_CENTER_SEED);
    Array2::from_shape_fn((TASK_COMPONENTS, TASK_DIM), |(_, j)| {
        let g: f64 = rng.sample(StandardNormal);
        if j < TASK_ACTIVE_DIMS {
            TASK_CENTER_SCALE * g
        } else {
            0.0
        }
    })
}

fn mixture(centers: &Array2<f64>, n: usize, shift: f64, s: u64) -> Array2<f64> {
    let mut rng = seed::rng(s);
    let mut out = Array2::zeros((n, TASK_DIM));
    for mut row in out.rows_mut() {
        let k = rng.random_range(0..TASK_COMPONENTS);
        for j in 0..TASK_DIM {
            let g: f64 = rng.sample(StandardNormal);
            let offset = if j >= TASK_ACTIVE_DIMS { shift } else { 0.0 };
            row[j] = centers[[k, j]] + g + offset;
        }
    }
    out
}

/// Eight-component Gaussian mixture in D = 8 with an OOD copy shifted by
/// 4σ along each of the three dimensions the mixture does not occupy.
pub fn synthetic_task(s: u64) -> SyntheticTask {
    let centers = task_centers();
    let base = seed::derive(s, 0x7A5C);
    SyntheticTask {
        train: mixture(&centers, TASK_TRAIN, 0.0, seed::derive(base, 1)),
        id_eval: mixture(&centers, TASK_EVAL, 0.0, seed::derive(base, 2)),
        ood_eval: mixture(&centers, TASK_EVAL, TASK_SHIFT, seed::derive(base, 3)),
    }
}

/// Twelve residual blocks at reduced width.
pub fn task_net() -> ScoreNetConfig {
    let mut net = ScoreNetConfig::new(TASK_DIM);
    net.hidden_dim = 32;
    net.time_embed_dim = 16;
    net
}

pub fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u128;
    for a in id {
        for b in ood {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64 * 100.0
}

/// Largest candidate λ keeping at least `tpr·N` ID scores, by exhaustive scan.
pub fn brute_threshold(id: &[f64], tpr: f64) -> f64 {
    let need = tpr * id.len() as f64 - 1e-9;
    let mut best = f64::NEG_INFINITY;
    for &c in id {
        let kept = id.iter().filter(|&&s| s >= c).count() as f64;
        if kept >= need && c > best {
            best = c;
        }
    }
    best
}

pub fn brute_fpr(id: &[f64], ood: &[f64], tpr: f64) -> f64 {
    let lam = brute_threshold(id, tpr);
    ood.iter().filter(|&&s| s >= lam).count() as f64 / ood.len() as f64 * 100.0
}
