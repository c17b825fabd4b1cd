use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, epsilon: 1e-15 }
    }
}

/// Exponential decay from `start` to `end` over `steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { start: 1e-2, end: 1e-3 }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64, total: u64) -> f64 {
        if total <= 1 {
            return self.start;
        }
        let frac = (step.min(total) as f64) / (total as f64);
        self.start * (self.end / self.start).powf(frac)
    }
}

/// Moment accumulators for one flat parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<T>,
    pub second: Vec<T>,
}

impl<T: Real> OptimState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, step: 0, first: vec![T::zero(); len], second: vec![T::zero(); len] }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// Applies one bias-corrected update. A gradient containing NaN or
    /// infinity is rejected before anything is modified.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(first_bad) = grads.iter().position(|g| !g.is_finite()) {
            let count = grads.iter().filter(|g| !g.is_finite()).count();
            return Err(Error::NonFinite(format!(
                "{count} non-finite gradient entries, first at index {first_bad} ({})",
                grads[first_bad]
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let corr1 = T::lit(1.0 - c.beta1.powi(t));
        let corr2 = T::lit(1.0 - c.beta2.powi(t));
        let eps = T::lit(c.epsilon);
        let lr = T::lit(lr);
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * self.first[i] + (one - b1) * g;
            let v = b2 * self.second[i] + (one - b2) * g * g;
            self.first[i] = m;
            self.second[i] = v;
            let m_hat = m / corr1;
            let v_hat = v / corr2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
