//! Standard normal helpers and a few log-densities shared across modules.

use libm::erfc;
use statrs::distribution::{ContinuousCDF, Normal};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal survival function, `1 - Φ(x)`, accurate in the upper tail.
#[inline]
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, polished with one Newton step against
/// [`norm_cdf`].
pub fn norm_ppf(p: f64) -> f64 {
    if p > 0.5 {
        return -norm_ppf(1.0 - p);
    }
    let x = Normal::standard().inverse_cdf(p);
    if !x.is_finite() {
        return x;
    }
    let density = (-0.5 * x * x - LN_SQRT_2PI).exp();
    if density > 0.0 {
        x - (norm_cdf(x) - p) / density
    } else {
        x
    }
}

#[inline]
pub fn norm_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// `ln Σ exp(x_i)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}
