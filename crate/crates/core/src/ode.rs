//! Adaptive Runge–Kutta–Fehlberg 4(5) integrator.
//!
//! The fifth-order solution is propagated and the embedded fourth-order
//! solution provides the local error estimate. The error norm is the RMS of
//! `err_i / (atol + rtol·max(|y_i|, |y_new_i|))`; a step is accepted when the
//! norm is ≤ 1. Integration may run forward or backward in time.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
    /// Initial step size; chosen automatically when `None`.
    pub first_step: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            atol: 1e-5,
            rtol: 1e-5,
            max_steps: 100_000,
            first_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub y: Vec<f64>,
    /// Number of right-hand-side evaluations.
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

// Fehlberg tableau.
const C: [f64; 6] = [0.0, 0.25, 3.0 / 8.0, 12.0 / 13.0, 1.0, 0.5];
const A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
    [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
    [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
    [
        -8.0 / 27.0,
        2.0,
        -3544.0 / 2565.0,
        1859.0 / 4104.0,
        -11.0 / 40.0,
    ],
];
const B5: [f64; 6] = [
    16.0 / 135.0,
    0.0,
    6656.0 / 12825.0,
    28561.0 / 56430.0,
    -9.0 / 50.0,
    2.0 / 55.0,
];
const B4: [f64; 6] = [
    25.0 / 216.0,
    0.0,
    1408.0 / 2565.0,
    2197.0 / 4104.0,
    -1.0 / 5.0,
    0.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

fn error_norm(err: &[f64], y0: &[f64], y1: &[f64], atol: f64, rtol: f64) -> f64 {
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let scale = atol + rtol * a.abs().max(b.abs());
            (e / scale).powi(2)
        })
        .sum();
    (sum / err.len().max(1) as f64).sqrt()
}

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1`.
///
/// `f(t, y, dy)` writes the derivative into `dy` and may fail; failures and
/// non-finite derivatives abort the integration with the time reached.
pub fn integrate<F>(
    mut f: F,
    t0: f64,
    t1: f64,
    y0: &[f64],
    opts: &SolverOptions,
) -> Result<Solution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if !(opts.atol > 0.0 && opts.rtol > 0.0) {
        return Err(Error::InvalidInput("atol and rtol must be positive".into()));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut sol = Solution {
        y: Vec::new(),
        nfe: 0,
        accepted: 0,
        rejected: 0,
    };
    if t0 == t1 || n == 0 {
        sol.y = y;
        return Ok(sol);
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 6];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];

    let mut eval = |t: f64, y: &[f64], out: &mut [f64], nfe: &mut usize| -> Result<()> {
        *nfe += 1;
        f(t, y, out)?;
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Solver {
                t,
                reason: "non-finite derivative".into(),
            })
        }
    };

    let mut t = t0;
    eval(t, &y, &mut k[0], &mut sol.nfe)?;

    let mut h = match opts.first_step {
        Some(h) => h.abs().min(span),
        None => {
            // Hairer–Nørsett–Wanner starting step heuristic.
            let scale: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
            let d0 = rms_scaled(&y, &scale);
            let d1 = rms_scaled(&k[0], &scale);
            let h0 = if d0 < 1e-5 || d1 < 1e-5 {
                1e-6
            } else {
                0.01 * d0 / d1
            };
            let h0 = h0.min(span);
            for i in 0..n {
                stage[i] = y[i] + dir * h0 * k[0][i];
            }
            let (first, rest) = k.split_at_mut(1);
            eval(t + dir * h0, &stage, &mut rest[0], &mut sol.nfe)?;
            let diff: Vec<f64> = rest[0].iter().zip(&first[0]).map(|(a, b)| a - b).collect();
            let d2 = rms_scaled(&diff, &scale) / h0;
            let h1 = if d1.max(d2) <= 1e-15 {
                (h0 * 1e-3).max(1e-6)
            } else {
                (0.01 / d1.max(d2)).powf(0.2)
            };
            (100.0 * h0).min(h1).min(span)
        }
    };

    let min_step = 1e-14 * span.max(t0.abs()).max(t1.abs()).max(1.0);
    while (t1 - t) * dir > 0.0 {
        if sol.accepted + sol.rejected >= opts.max_steps {
            return Err(Error::Solver {
                t,
                reason: format!("exceeded {} steps", opts.max_steps),
            });
        }
        if h < min_step {
            return Err(Error::Solver {
                t,
                reason: format!("step size underflow (h = {h:e})"),
            });
        }
        let last = (t + dir * h - t1) * dir >= 0.0;
        let h_step = if last { (t1 - t).abs() } else { h };
        let hs = dir * h_step;

        for s in 1..6 {
            for i in 0..n {
                let mut acc = y[i];
                for j in 0..s {
                    acc += hs * A[s][j] * k[j][i];
                }
                stage[i] = acc;
            }
            let (_, rest) = k.split_at_mut(s);
            eval(t + C[s] * hs, &stage, &mut rest[0], &mut sol.nfe)?;
        }
        for i in 0..n {
            let mut hi = 0.0;
            let mut lo = 0.0;
            for s in 0..6 {
                hi += B5[s] * k[s][i];
                lo += B4[s] * k[s][i];
            }
            y_new[i] = y[i] + hs * hi;
            err[i] = hs * (hi - lo);
        }
        let norm = error_norm(&err, &y, &y_new, opts.atol, opts.rtol);
        if !norm.is_finite() {
            return Err(Error::Solver {
                t,
                reason: "non-finite error estimate".into(),
            });
        }
        if norm <= 1.0 {
            t = if last { t1 } else { t + hs };
            std::mem::swap(&mut y, &mut y_new);
            sol.accepted += 1;
            let factor = if norm == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h = h_step * factor;
            if (t1 - t) * dir > 0.0 {
                eval(t, &y, &mut k[0], &mut sol.nfe)?;
            }
        } else {
            sol.rejected += 1;
            h = h_step * (SAFETY * norm.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
        }
    }
    sol.y = y;
    Ok(sol)
}

fn rms_scaled(v: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(a, b)| (a / b).powi(2)).sum();
    (s / v.len().max(1) as f64).sqrt()
}
