//! Gaussian tail probabilities and log-domain reductions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `ln Q(t)` where `Q(t) = 1 - Φ(t)` is the upper tail.
///
/// Switches to the asymptotic Mills-ratio series once `erfc` would
/// underflow.
pub fn log_upper_tail(t: f64) -> f64 {
    if t == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    if t < 35.0 {
        return (0.5 * libm::erfc(t * FRAC_1_SQRT_2)).ln();
    }
    let inv2 = 1.0 / (t * t);
    // 1 - 1/t^2 + 3/t^4 - 15/t^6 + ...
    let mut term = 1.0;
    let mut series = 1.0;
    for k in 1..10 {
        term *= -((2 * k - 1) as f64) * inv2;
        series += term;
    }
    -0.5 * t * t - t.ln() - 0.5 * (2.0 * PI).ln() + series.ln()
}

/// `ln(exp(a) - exp(b))` for `a >= b`.
fn log_diff_exp(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln P(lo <= X < hi)` for `X ~ N(mean, std²)`.
///
/// Cells entirely on one side of the mean are evaluated as a difference of
/// upper-tail probabilities on that side, so far-tail cells keep full
/// relative precision.
pub fn log_gauss_cell_prob(lo: f64, hi: f64, mean: f64, std: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "empty cell [{lo}, {hi})"
        )));
    }
    if !(std > 0.0) {
        return Err(Error::InvalidArgument(format!("std = {std}")));
    }
    Ok(log_cell_prob_unchecked(lo, hi, mean, std))
}

#[inline]
pub(crate) fn log_cell_prob_unchecked(lo: f64, hi: f64, mean: f64, std: f64) -> f64 {
    let a = (lo - mean) / std;
    let b = (hi - mean) / std;
    let v = if a >= 0.0 {
        log_diff_exp(log_upper_tail(a), log_upper_tail(b))
    } else if b <= 0.0 {
        log_diff_exp(log_upper_tail(-b), log_upper_tail(-a))
    } else {
        (0.5 * (libm::erf(b * FRAC_1_SQRT_2) + libm::erf(-a * FRAC_1_SQRT_2))).ln()
    };
    v.min(0.0)
}

/// `ln Σ exp(v_i)`.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("logsumexp of empty slice".into()));
    }
    Ok(logsumexp_nonempty(v))
}

#[inline]
pub(crate) fn logsumexp_nonempty(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Normalizes log-weights in place into probabilities; returns the log
/// normalizer.
pub(crate) fn normalize_log_weights(w: &mut [f64]) -> f64 {
    let z = logsumexp_nonempty(w);
    for x in w.iter_mut() {
        *x = (*x - z).exp();
    }
    z
}
