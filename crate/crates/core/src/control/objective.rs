use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::FourierControl;

/// Weights of J = η₁‖u̇‖² + ‖u - η₂‖² (plain sums over the grid).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// s².
    pub eta1: f64,
    /// Anchor level, J/m³.
    pub eta2: f64,
}

/// The objective restricted to Fourier controls on a fixed set of times.
/// Quadratic in the coefficients, so value, gradient and Hessian are exact.
#[derive(Debug, Clone)]
pub struct Objective {
    config: ObjectiveConfig,
    phi: DMatrix<f64>,
    dphi: DMatrix<f64>,
}

impl Objective {
    pub fn new(config: ObjectiveConfig, harmonics: usize, times: &[f64]) -> Self {
        let f = FourierControl::<f64>::constant(0.0, harmonics);
        let n = 2 * harmonics + 1;
        let mut phi = DMatrix::zeros(times.len(), n);
        let mut dphi = DMatrix::zeros(times.len(), n);
        for (k, &t) in times.iter().enumerate() {
            phi.set_row(k, &f.basis(t).transpose());
            dphi.set_row(k, &f.rate_basis(t).transpose());
        }
        Self { config, phi, dphi }
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    pub fn value(&self, kappa: &DVector<f64>) -> f64 {
        let rate = &self.dphi * kappa;
        let dev = (&self.phi * kappa).add_scalar(-self.config.eta2);
        self.config.eta1 * rate.norm_squared() + dev.norm_squared()
    }

    pub fn gradient(&self, kappa: &DVector<f64>) -> DVector<f64> {
        let rate = &self.dphi * kappa;
        let dev = (&self.phi * kappa).add_scalar(-self.config.eta2);
        (self.dphi.transpose() * rate) * (2.0 * self.config.eta1) + self.phi.transpose() * dev * 2.0
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        (self.dphi.transpose() * &self.dphi) * (2.0 * self.config.eta1) + self.phi.transpose() * &self.phi * 2.0
    }
}
