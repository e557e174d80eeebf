//! Closed forms for the VE, VP and sub-VP diffusion SDEs.
//!
//! | kind  | drift f(z,t)  | diffusion g(t)                                   |
//! |-------|---------------|--------------------------------------------------|
//! | VE    | 0             | σ(t)·sqrt(2 ln(σ_max/σ_min))                     |
//! | VP    | −½β(t)·z      | sqrt(β(t))                                       |
//! | SubVP | −½β(t)·z      | sqrt(β(t)·(1 − exp(−2B(t))))                     |
//!
//! with `β(t) = β_min + t(β_max − β_min)`, `B(t) = ∫₀ᵗ β`, and
//! `σ(t) = σ_min (σ_max/σ_min)^t`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdeKind {
    Ve,
    Vp,
    SubVp,
}

impl fmt::Display for SdeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SdeKind::Ve => "ve",
            SdeKind::Vp => "vp",
            SdeKind::SubVp => "subvp",
        })
    }
}

impl FromStr for SdeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ve" => Ok(SdeKind::Ve),
            "vp" => Ok(SdeKind::Vp),
            "subvp" | "sub-vp" | "sub_vp" => Ok(SdeKind::SubVp),
            other => Err(Error::Config(format!("unknown SDE kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub kind: SdeKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for SdeSpec {
    fn default() -> Self {
        Self::new(SdeKind::SubVp)
    }
}

/// Mean coefficient and isotropic standard deviation of `p_0t(z(t) | z(0))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub mean_coeff: f64,
    pub std: f64,
}

impl SdeSpec {
    pub fn new(kind: SdeKind) -> Self {
        Self {
            kind,
            sigma_min: 0.01,
            sigma_max: 50.0,
            beta_min: 0.2,
            beta_max: 20.0,
        }
    }

    pub fn ve() -> Self {
        Self::new(SdeKind::Ve)
    }

    pub fn vp() -> Self {
        Self::new(SdeKind::Vp)
    }

    pub fn subvp() -> Self {
        Self::new(SdeKind::SubVp)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_min, self.sigma_max, self.beta_min, self.beta_max];
        if !all.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::Config(
                "SDE parameters must be finite and strictly positive".into(),
            ));
        }
        if self.sigma_min >= self.sigma_max {
            return Err(Error::Config(
                "sde.sigma_min must be < sde.sigma_max".into(),
            ));
        }
        if self.beta_min >= self.beta_max {
            return Err(Error::Config("sde.beta_min must be < sde.beta_max".into()));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `B(t) = ∫₀ᵗ β(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// Scalar `a(t)` such that `f(z, t) = a(t)·z`.
    pub fn drift_coeff(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::Ve => 0.0,
            SdeKind::Vp | SdeKind::SubVp => -0.5 * self.beta(t),
        }
    }

    /// `g(t)²`, computed without the square root.
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::Ve => {
                let s = self.sigma(t);
                s * s * 2.0 * (self.sigma_max / self.sigma_min).ln()
            }
            SdeKind::Vp => self.beta(t),
            SdeKind::SubVp => self.beta(t) * (-(-2.0 * self.integrated_beta(t)).exp_m1()),
        }
    }

    pub(crate) fn kernel_unchecked(&self, t: f64) -> Kernel {
        match self.kind {
            SdeKind::Ve => Kernel {
                mean_coeff: 1.0,
                std: self.sigma(t),
            },
            SdeKind::Vp => {
                let b = self.integrated_beta(t);
                Kernel {
                    mean_coeff: (-0.5 * b).exp(),
                    std: (-(-b).exp_m1()).sqrt(),
                }
            }
            SdeKind::SubVp => {
                let b = self.integrated_beta(t);
                Kernel {
                    mean_coeff: (-0.5 * b).exp(),
                    std: -(-b).exp_m1(),
                }
            }
        }
    }

    /// Isotropic variance of the terminal prior.
    pub fn prior_variance(&self) -> f64 {
        match self.kind {
            SdeKind::Ve => self.sigma_max * self.sigma_max,
            SdeKind::Vp | SdeKind::SubVp => 1.0,
        }
    }

    pub(crate) fn prior_logpdf_unchecked(&self, z: &[f64]) -> f64 {
        let var = self.prior_variance();
        let sq: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * z.len() as f64 * (2.0 * PI * var).ln() - 0.5 * sq / var
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("time {t} outside [0, 1]")))
    }
}

pub fn drift(spec: &SdeSpec, z: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
    check_time(t)?;
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("drift input".into()));
    }
    let a = spec.drift_coeff(t);
    Ok(z.mapv(|v| a * v))
}

pub fn diffusion(spec: &SdeSpec, t: f64) -> Result<f64> {
    check_time(t)?;
    Ok(spec.diffusion_sq(t).sqrt())
}

pub fn kernel(spec: &SdeSpec, t: f64) -> Result<Kernel> {
    check_time(t)?;
    Ok(spec.kernel_unchecked(t))
}

/// Log-density (nats) of the prior `p_1`.
pub fn prior_logpdf(spec: &SdeSpec, z: ArrayView1<f64>) -> Result<f64> {
    let z = z.to_vec();
    ensure_finite(&z, "prior input")?;
    Ok(spec.prior_logpdf_unchecked(&z))
}
