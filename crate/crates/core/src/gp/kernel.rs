use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stationary unit-variance kernels on the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `exp(-r² / (2ℓ²))`.
    Eq { lengthscale: f64 },
    /// `(1 + √5 r/ℓ + 5r²/(3ℓ²)) exp(-√5 r/ℓ)`.
    Matern52 { lengthscale: f64 },
    /// EQ envelope times a periodic factor:
    /// `exp(-r²/(2ℓ_d²)) · exp(-2 sin²(πr/p) / ℓ_p²)`.
    WeaklyPeriodic {
        decay_lengthscale: f64,
        period: f64,
        periodic_lengthscale: f64,
    },
}

impl KernelSpec {
    pub fn eq() -> Self {
        KernelSpec::Eq { lengthscale: 1.0 }
    }

    pub fn matern52() -> Self {
        KernelSpec::Matern52 { lengthscale: 0.5 }
    }

    pub fn weakly_periodic() -> Self {
        KernelSpec::WeaklyPeriodic {
            decay_lengthscale: 2.0,
            period: 1.0,
            periodic_lengthscale: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Eq { .. } => "eq",
            KernelSpec::Matern52 { .. } => "matern52",
            KernelSpec::WeaklyPeriodic { .. } => "weakly_periodic",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let params: Vec<(&str, f64)> = match *self {
            KernelSpec::Eq { lengthscale } | KernelSpec::Matern52 { lengthscale } => {
                vec![("lengthscale", lengthscale)]
            }
            KernelSpec::WeaklyPeriodic {
                decay_lengthscale,
                period,
                periodic_lengthscale,
            } => vec![
                ("decay_lengthscale", decay_lengthscale),
                ("period", period),
                ("periodic_lengthscale", periodic_lengthscale),
            ],
        };
        for (name, v) in params {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{} kernel {name} must be positive, got {v}",
                    self.name()
                )));
            }
        }
        Ok(())
    }

    /// Kernel value at lag `r = x - x'`.
    pub fn at_lag(&self, r: f64) -> f64 {
        match *self {
            KernelSpec::Eq { lengthscale } => (-0.5 * r * r / (lengthscale * lengthscale)).exp(),
            KernelSpec::Matern52 { lengthscale } => {
                let s = 5f64.sqrt() * r.abs() / lengthscale;
                (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            KernelSpec::WeaklyPeriodic {
                decay_lengthscale,
                period,
                periodic_lengthscale,
            } => {
                let envelope = (-0.5 * r * r / (decay_lengthscale * decay_lengthscale)).exp();
                let s = (PI * r / period).sin();
                envelope * (-2.0 * s * s / (periodic_lengthscale * periodic_lengthscale)).exp()
            }
        }
    }

    /// Gram matrix `K[i][j] = k(x1[i], x2[j])`.
    pub fn matrix(&self, x1: &[f64], x2: &[f64]) -> Result<DMatrix<f64>> {
        self.validate()?;
        Ok(DMatrix::from_fn(x1.len(), x2.len(), |i, j| self.at_lag(x1[i] - x2[j])))
    }
}
