use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Linear noise schedule `beta(t) = beta0 + (beta1 - beta0) t` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta0: f64,
    pub beta1: f64,
    pub t_end: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.05,
            beta1: 20.0,
            t_end: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta0: f64, beta1: f64, t_end: f64) -> Result<Self> {
        let s = Self {
            beta0,
            beta1,
            t_end,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0 && self.beta0 < self.beta1 && self.beta1.is_finite()) {
            return invalid(format!(
                "schedule needs 0 < beta0 < beta1, got {} / {}",
                self.beta0, self.beta1
            ));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return invalid(format!(
                "terminal time must be positive, got {}",
                self.t_end
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    /// Integrated rate `B(t) = ∫₀ᵗ beta`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t
    }

    /// Mean coefficient `exp(-B(t)/2)` of the forward kernel.
    pub fn rho(&self, t: f64) -> f64 {
        (-0.5 * self.integral(t)).exp()
    }

    /// Forward-kernel variance `1 - exp(-B(t))`.
    pub fn var(&self, t: f64) -> f64 {
        -(-self.integral(t)).exp_m1()
    }
}

/// Time features fed to the networks: `(t, sin 2πt, cos 2πt, sin 4πt, cos 4πt)`.
pub fn time_embedding(t: f64) -> [f64; 5] {
    use std::f64::consts::TAU;
    [
        t,
        (TAU * t).sin(),
        (TAU * t).cos(),
        (2.0 * TAU * t).sin(),
        (2.0 * TAU * t).cos(),
    ]
}

pub const TIME_EMBED_DIM: usize = 5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values() {
        let s = NoiseSchedule::default();
        assert_eq!(s.rho(0.0), 1.0);
        assert_eq!(s.var(0.0), 0.0);
        assert!((s.var(s.t_end) - 1.0).abs() < 1e-4);
        assert!(s.rho(s.t_end) < 0.01);
    }

    #[test]
    fn integral_matches_quadrature() {
        let s = NoiseSchedule::default();
        let n = 10_000;
        let t = 0.73;
        let h = t / n as f64;
        let quad: f64 = (0..n).map(|i| s.beta((i as f64 + 0.5) * h) * h).sum();
        assert!((quad - s.integral(t)).abs() < 1e-9);
    }

    #[test]
    fn rejects_invalid() {
        assert!(NoiseSchedule::new(1.0, 0.5, 1.0).is_err());
        assert!(NoiseSchedule::new(0.0, 0.5, 1.0).is_err());
        assert!(NoiseSchedule::new(0.1, 0.5, 0.0).is_err());
    }
}
