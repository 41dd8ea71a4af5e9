//! Scalar special functions and numerically stable reductions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Below this argument `log_ndtr` switches to the asymptotic tail series.
const TAIL_SWITCH: f64 = -8.0;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Asymptotic tail series `Σ (−1)ⁿ (2n−1)!! / z²ⁿ` used for `z < -8`,
/// summed until the terms stop shrinking below roundoff.
fn tail_series(z: f64) -> f64 {
    let r = 1.0 / (z * z);
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..40 {
        let next = -term * (2 * n - 1) as f64 * r;
        if next.abs() >= term.abs() || next.abs() < 1e-17 {
            break;
        }
        term = next;
        sum += term;
    }
    sum
}

/// `log Φ(z)`, accurate from the deep lower tail to the upper tail.
pub fn log_ndtr(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        -0.5 * z * z - (-z).ln() - 0.5 * LN_2PI + tail_series(z).ln()
    } else if z > 5.0 {
        (-0.5 * libm::erfc(z * FRAC_1_SQRT_2)).ln_1p()
    } else {
        normal_cdf(z).ln()
    }
}

/// Derivative of `log Φ(z)`, i.e. `φ(z)/Φ(z)`.
pub fn d_log_ndtr(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        -z / tail_series(z)
    } else {
        (-0.5 * z * z - 0.5 * LN_2PI - log_ndtr(z)).exp()
    }
}

/// `log(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}
