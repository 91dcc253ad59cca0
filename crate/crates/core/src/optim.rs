//! Bias-corrected Adam over flat parameter slices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { first_moment: vec![0.0; num_params], second_moment: vec![0.0; num_params], step_count: 0, config })
    }

    /// One update in place. Parameters are untouched if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n {
            return Err(Error::Dimension { context: "adam step", expected: n, got: params.len().min(grads.len()) });
        }
        let t = self.step_count + 1;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric { step: t });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first_moment).zip(&mut self.second_moment) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
        self.step_count = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_rest_is_a_no_op() {
        let mut s = AdamState::new(3, AdamConfig::default()).unwrap();
        let mut p = [1.0, -2.0, 3.5];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.5]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: m̂ = g, v̂ = g², update = lr · g / (|g| + eps).
        for g in [0.5, 3.0, -2.0] {
            let mut s = AdamState::new(1, AdamConfig::default()).unwrap();
            let mut p = [1.0];
            s.step(&mut p, &[g]).unwrap();
            let expected = 1.0 - 1e-3 * g / (f64::abs(g) + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!((1.0 - p[0]).abs() <= 1e-3 && (1.0 - p[0]).signum() == g.signum());
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = AdamState::new(1, AdamConfig { lr: 0.1, ..AdamConfig::default() }).unwrap();
        let mut x = [5.0];
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            s.step(&mut x, &g).unwrap();
        }
        assert!(x[0].abs() < 0.5, "x = {}", x[0]);
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut s = AdamState::new(2, AdamConfig::default()).unwrap();
        let mut p = [0.0, 0.0];
        s.step(&mut p, &[1.0, 1.0]).unwrap();
        assert_eq!(s.step(&mut p, &[f64::NAN, 0.0]).unwrap_err(), Error::Numeric { step: 2 });
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn invalid_config() {
        assert!(AdamState::new(1, AdamConfig { beta1: 1.0, ..AdamConfig::default() }).is_err());
        assert!(AdamState::new(1, AdamConfig { lr: 0.0, ..AdamConfig::default() }).is_err());
    }
}
