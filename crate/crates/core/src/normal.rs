//! Standard normal density, distribution and tail-safe log quantities.
//!
//! Beyond `|x| > 30` the distribution function is evaluated through its
//! asymptotic tail series so that neither `Φ` nor `1 - Φ` saturate to an
//! exact 0 or 1 inside the likelihood.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Index magnitude beyond which the tail expansion is used.
pub const TAIL_GUARD: f64 = 30.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// `-1/x² + 3/x⁴ - 15/x⁶`: the Mills-ratio tail series minus its leading 1.
#[inline]
fn tail_series_minus_one(x: f64) -> f64 {
    let z = 1.0 / (x * x);
    z * (-1.0 + z * (3.0 - 15.0 * z))
}

/// Standard normal distribution function.
pub fn cdf(x: f64) -> f64 {
    if x < -TAIL_GUARD {
        ln_cdf(x).exp()
    } else {
        0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
    }
}

/// `ln Φ(x)`, finite for every finite `x`.
pub fn ln_cdf(x: f64) -> f64 {
    if x < -TAIL_GUARD {
        ln_pdf(x) - (-x).ln() + (1.0 + tail_series_minus_one(x)).ln()
    } else if x > 0.0 {
        (-cdf(-x)).ln_1p()
    } else {
        cdf(x).ln()
    }
}

/// Inverse Mills ratio `φ(x)/Φ(x)`.
pub fn mills(x: f64) -> f64 {
    if x < -TAIL_GUARD {
        -x / (1.0 + tail_series_minus_one(x))
    } else {
        pdf(x) / cdf(x)
    }
}

/// `x + φ(x)/Φ(x)`, evaluated without cancellation in the far left tail.
pub fn x_plus_mills(x: f64) -> f64 {
    if x < -TAIL_GUARD {
        let r1 = tail_series_minus_one(x);
        x * r1 / (1.0 + r1)
    } else {
        x + mills(x)
    }
}

/// Upper tail probability of a chi-square variable with `df` degrees of freedom.
pub fn chi2_sf(stat: f64, df: usize) -> f64 {
    if !(stat > 0.0) {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    dist.sf(stat)
}

/// Quantile of the chi-square distribution.
pub fn chi2_quantile(p: f64, df: usize) -> f64 {
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    dist.inverse_cdf(p)
}
