//! Small numeric helpers shared by estimators and tests.

use crate::sequence::{is_neg_inf, NEG_INF};

/// `log Σ exp(x_i)`; [`NEG_INF`] when every term is the sentinel.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() || is_neg_inf(m) {
        return NEG_INF;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `log (1/N) Σ exp(x_i)`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let l = log_sum_exp(xs);
    if is_neg_inf(l) {
        l
    } else {
        l - (xs.len() as f64).ln()
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
