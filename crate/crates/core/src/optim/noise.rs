use serde::{Deserialize, Serialize};

use super::OptimError;

/// 95% quantile of the χ² distribution with 2 degrees of freedom.
pub const CHI2_2DOF_95: f64 = 5.991;

/// Smallest deviation used when a model yields σ = 0 (linear model at
/// octave 0); keeps normalized residuals finite.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Observation deviation as an affine function of the octave index:
/// `σ = k·level + σ0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub k: f64,
    pub sigma0: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { k: 1.0, sigma0: 1.0 }
    }
}

impl NoiseModel {
    pub fn new(k: f64, sigma0: f64) -> Result<Self, OptimError> {
        if !(k.is_finite() && sigma0.is_finite()) || k < 0.0 || sigma0 < 0.0 || (k == 0.0 && sigma0 == 0.0) {
            return Err(OptimError::InvalidInput(format!("noise model k={k}, sigma0={sigma0}")));
        }
        Ok(Self { k, sigma0 })
    }

    pub fn linear(k: f64) -> Self {
        Self { k, sigma0: 0.0 }
    }

    pub fn sigma(&self, level: u8) -> f64 {
        self.k * level as f64 + self.sigma0
    }

    /// `sigma` clamped to [`SIGMA_FLOOR`], for use as a divisor.
    pub fn effective_sigma(&self, level: u8) -> f64 {
        self.sigma(level).max(SIGMA_FLOOR)
    }

    /// Inverse variance of an observation at `level`.
    pub fn information(&self, level: u8) -> f64 {
        let s = self.effective_sigma(level);
        1.0 / (s * s)
    }
}

/// `σ = k·level + σ0` for a possibly negative level read from outside.
pub fn sigma(model: &NoiseModel, level: i64) -> Result<f64, OptimError> {
    if level < 0 {
        return Err(OptimError::InvalidInput(format!("negative level {level}")));
    }
    Ok(model.k * level as f64 + model.sigma0)
}

/// Accepts iff `‖r‖² / σ² < 5.991`.
pub fn chi2_gate(residual_px: &nalgebra::Vector2<f64>, sigma: f64) -> bool {
    chi2_accepts(residual_px.norm_squared() / (sigma * sigma))
}

/// Gate on an already normalized squared residual.
#[inline]
pub fn chi2_accepts(e2: f64) -> bool {
    e2 < CHI2_2DOF_95
}

/// Huber cost on a squared normalized residual with threshold `delta2`.
#[inline]
pub fn huber(e2: f64, delta2: f64) -> f64 {
    if e2 <= delta2 {
        e2
    } else {
        2.0 * (delta2 * e2).sqrt() - delta2
    }
}

/// IRLS weight matching [`huber`]: d huber / d e2.
#[inline]
pub fn huber_weight(e2: f64, delta2: f64) -> f64 {
    if e2 <= delta2 {
        1.0
    } else {
        (delta2 / e2).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    #[test]
    fn linear_and_affine_configurations() {
        let lin = NoiseModel::new(1.0, 0.0).unwrap();
        assert_eq!(lin.sigma(2), 2.0);
        let aff = NoiseModel::new(2.0, 5.0).unwrap();
        assert_eq!(aff.sigma(0), 5.0);
        let c = NoiseModel::new(0.0, 3.0).unwrap();
        for l in 0..8 {
            assert_eq!(c.sigma(l), 3.0);
        }
    }

    #[test]
    fn negative_level_and_bad_models() {
        assert!(sigma(&NoiseModel::default(), -1).is_err());
        assert_eq!(sigma(&NoiseModel::default(), 3).unwrap(), 4.0);
        assert!(NoiseModel::new(0.0, 0.0).is_err());
        assert!(NoiseModel::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn monotone_in_level() {
        for (k, s0) in [(0.0, 1.0), (0.5, 0.0), (2.0, 5.0)] {
            let m = NoiseModel { k, sigma0: s0 };
            for l in 0..6u8 {
                let (a, b) = (m.sigma(l), m.sigma(l + 1));
                assert!(b >= a);
                assert_eq!(a == b, k == 0.0);
            }
        }
    }

    #[test]
    fn gate() {
        assert!(chi2_gate(&Vector2::zeros(), 1.0));
        let s = 2.0;
        let r = Vector2::new(s * CHI2_2DOF_95.sqrt(), 0.0);
        assert!(!chi2_accepts(CHI2_2DOF_95));
        assert!(chi2_accepts(CHI2_2DOF_95 - 1e-12));
        assert!(!chi2_gate(&(r * (1.0 + 1e-12)), s));
        assert!(chi2_gate(&Vector2::new(3.0, 4.0), 5.0));
    }

    #[test]
    fn huber_is_continuous() {
        let d = CHI2_2DOF_95;
        assert!((huber(d, d) - huber(d + 1e-12, d)).abs() < 1e-9);
        assert_eq!(huber(1.0, d), 1.0);
        assert!(huber(100.0, d) < 100.0);
    }
}
