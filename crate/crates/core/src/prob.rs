//! Log-domain probability arithmetic.
//!
//! Every probability in the crate is carried as a natural logarithm. Zero
//! probability is `-inf` and saturates under addition (`-inf + x = -inf`).

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rounding slack accepted above `0.0` before a log-probability is rejected.
const LOG_ONE_SLACK: f64 = 1e-9;

/// A natural-log probability in `[-inf, 0]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LogProb(f64);

impl LogProb {
    /// Probability one.
    pub const ONE: LogProb = LogProb(0.0);
    /// Probability zero.
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);

    /// Wraps a raw log value. Values a hair above zero (floating-point
    /// rounding) are clamped to zero.
    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(Error::usage("log-probability is NaN"));
        }
        if value > LOG_ONE_SLACK {
            return Err(Error::usage(format!(
                "log-probability {value} exceeds 0 (probability above one)"
            )));
        }
        Ok(LogProb(value.min(0.0)))
    }

    pub fn from_prob(p: f64) -> Result<Self> {
        if !(0.0..=1.0 + LOG_ONE_SLACK).contains(&p) {
            return Err(Error::usage(format!("probability {p} outside [0, 1]")));
        }
        LogProb::new(p.ln())
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn prob(self) -> f64 {
        self.0.exp()
    }

    pub fn is_zero(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }

    /// Total order: `-inf` first, then increasing.
    pub fn total_cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl TryFrom<f64> for LogProb {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        LogProb::new(value)
    }
}

impl From<LogProb> for f64 {
    fn from(lp: LogProb) -> f64 {
        lp.0
    }
}

impl fmt::Display for LogProb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

/// Product of two probabilities.
impl std::ops::Mul for LogProb {
    type Output = LogProb;

    #[inline]
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, other: LogProb) -> LogProb {
        LogProb(self.0 + other.0)
    }
}

/// `ln(exp(a) + exp(b))` on raw log values.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Max-shifted `ln Σ exp(v_i)` on raw values. Returns `-inf` for an empty
/// slice or when every term is `-inf`.
pub fn log_sum_exp_raw(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if values.len() == 1 {
        return values[0];
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `ln Σ exp(v_i)` over log-probabilities.
pub fn log_sum_exp(values: &[LogProb]) -> Result<LogProb> {
    if values.is_empty() {
        return Err(Error::usage("log_sum_exp of an empty list"));
    }
    let raw: Vec<f64> = values.iter().map(|v| v.0).collect();
    LogProb::new(log_sum_exp_raw(&raw))
}

/// Scales non-negative weights to a probability vector.
pub fn normalize_distribution(weights: &[f64]) -> Result<Vec<f64>> {
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::usage(format!(
            "weights must be finite and non-negative, got {w}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "cannot normalize weights that are all zero".into(),
        ));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Row softmax of raw logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row log-softmax of raw logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp_raw(logits);
    logits.iter().map(|x| x - lse).collect()
}

/// Checks that `row` is a probability distribution within `tol`.
pub(crate) fn check_distribution(row: &[f64], tol: f64, what: &str) -> Result<()> {
    if row.is_empty() {
        return Err(Error::usage(format!("{what}: empty distribution")));
    }
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::usage(format!("{what}: invalid probability {p}")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::usage(format!(
            "{what}: probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(())
}
