//! Log-domain semiring primitives.
//!
//! Probabilities are carried as natural logarithms. `max_star` is the
//! Jacobian logarithm `ln(e^a + e^b)`; negative infinity is the additive
//! identity and encodes an exact zero probability.

use alloc::vec::Vec;
use core::ops::Deref;

use crate::error::{Error, Result};
use crate::math;

/// ln(e^a + e^b), evaluated as `max(a, b) + ln(1 + e^-|a-b|)`.
#[inline]
pub fn max_star(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + math::ln_1p(math::exp(lo - hi))
}

/// ln Σ e^{v_i}. Returns `Error::EmptyReduction` for an empty slice.
pub fn max_star_reduce(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyReduction);
    }
    Ok(log_sum_exp(v))
}

/// Unchecked ln Σ e^{v_i} for hot loops; an empty or all -inf slice gives -inf.
#[inline]
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY || hi == f64::INFINITY {
        return hi;
    }
    let sum: f64 = v.iter().map(|&x| math::exp(x - hi)).sum();
    hi + math::ln(sum)
}

/// Writes the softmax of `v` into `out` and returns ln Σ e^{v_i}.
#[inline]
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) -> f64 {
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return hi;
    }
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = math::exp(x - hi);
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
    hi + math::ln(sum)
}

/// A vector of log-probabilities (nats). Never contains NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct LogVec(Vec<f64>);

impl LogVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("log-probability vector contains NaN".into()));
        }
        Ok(Self(values))
    }

    /// The uniform distribution over `m` outcomes.
    pub fn uniform(m: usize) -> Self {
        Self(alloc::vec![-math::ln(m as f64); m])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// True if the linear-domain entries sum to one within `tol` in the log domain.
    pub fn is_normalized(&self, tol: f64) -> bool {
        !self.0.is_empty() && log_sum_exp(&self.0).abs() <= tol
    }
}

impl Deref for LogVec {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Subtracts `max_star_reduce(v)` so that the linear-domain entries sum to one.
pub fn log_normalize(v: &[f64]) -> Result<LogVec> {
    let z = max_star_reduce(v)?;
    if z == f64::NEG_INFINITY {
        return Err(Error::DegenerateDistribution);
    }
    LogVec::new(v.iter().map(|&x| x - z).collect())
}

/// In-place normalization used by the detectors; rows are assumed non-degenerate.
#[inline]
pub(crate) fn normalize_in_place(v: &mut [f64]) {
    let z = log_sum_exp(v);
    v.iter_mut().for_each(|x| *x -= z);
}
