//! The three loss terms and their gradients. Depths are in meters.

use serde::{Deserialize, Serialize};

use crate::real::Real;

/// `sum_i |pred_i - target_i|^2` over rays.
pub fn color_loss<T: Real>(pred: &[[T; 3]], target: &[[T; 3]]) -> T {
    pred.iter().zip(target).map(|(p, t)| (0..3).fold(T::zero(), |a, c| a + (p[c] - t[c]) * (p[c] - t[c]))).fold(T::zero(), |a, v| a + v)
}

pub fn color_loss_grad<T: Real>(pred: &[[T; 3]], target: &[[T; 3]]) -> Vec<[T; 3]> {
    let two = T::lit(2.0);
    pred.iter().zip(target).map(|(p, t)| std::array::from_fn(|c| two * (p[c] - t[c]))).collect()
}

/// Squared depth error over the rays that carry a point-like depth.
pub fn irs_loss<T: Real>(pred: &[T], target: &[Option<T>]) -> T {
    pred.iter().zip(target).filter_map(|(&p, t)| t.map(|t| (p - t) * (p - t))).fold(T::zero(), |a, v| a + v)
}

pub fn irs_loss_grad<T: Real>(pred: &[T], target: &[Option<T>]) -> Vec<T> {
    pred.iter().zip(target).map(|(&p, t)| t.map_or(T::zero(), |t| T::lit(2.0) * (p - t))).collect()
}

/// Whether a ray renders closer than its USS reading allows.
pub fn uss_violates<T: Real>(pred: T, target: T, eps: T) -> bool {
    pred < target - eps
}

/// One-sided squared error: only rays rendering closer than
/// `target - eps` contribute.
pub fn uss_loss<T: Real>(pred: &[T], target: &[Option<T>], eps: T) -> T {
    pred.iter()
        .zip(target)
        .filter_map(|(&p, t)| t.filter(|&t| uss_violates(p, t, eps)).map(|t| (p - t) * (p - t)))
        .fold(T::zero(), |a, v| a + v)
}

pub fn uss_loss_grad<T: Real>(pred: &[T], target: &[Option<T>], eps: T) -> Vec<T> {
    pred.iter()
        .zip(target)
        .map(|(&p, t)| match t {
            Some(t) if uss_violates(p, *t, eps) => T::lit(2.0) * (p - *t),
            _ => T::zero(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub color: f64,
    pub irs: f64,
    pub uss: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { color: 1.0, irs: 1.0, uss: 1.0 }
    }
}

/// How each term is reduced over the batch before backpropagation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Plain sums over the batch, so a term's pull grows with the number of
    /// rays carrying it.
    #[default]
    Sum,
    /// Each term divided by its own active-ray count.
    Mean,
}

impl LossReduction {
    /// Factor applied to a term's sum over `n` active rays.
    pub fn scale(self, n: usize) -> f64 {
        match (self, n) {
            (_, 0) => 0.0,
            (LossReduction::Sum, _) => 1.0,
            (LossReduction::Mean, n) => 1.0 / n as f64,
        }
    }
}

/// Each term is its weighted sum divided by the number of rays carrying
/// that kind of supervision. `objective` is what was backpropagated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_irs: f64,
    pub l_uss: f64,
    pub l_tot: f64,
    pub n_c: usize,
    pub n_irs: usize,
    pub n_uss: usize,
    pub objective: f64,
}

impl LossReport {
    pub fn new(l_c: f64, l_irs: f64, l_uss: f64, n_c: usize, n_irs: usize, n_uss: usize) -> Self {
        Self { l_c, l_irs, l_uss, l_tot: l_c + l_irs + l_uss, n_c, n_irs, n_uss, objective: l_c + l_irs + l_uss }
    }

    pub fn is_finite(&self) -> bool {
        self.l_tot.is_finite() && self.objective.is_finite()
    }
}
