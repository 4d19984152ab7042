//! Classical random-effects meta-analysis: REML heterogeneity, inverse
//! variance pooling and the Wald test.

use serde::{Deserialize, Serialize};

use crate::dist::norm_sf;
use crate::effectsize::Estimate;
use crate::error::{Error, Result};

const LOG_EPS: f64 = 1e-12;
const MAX_ITER: usize = 200;
const BRACKET_TOL: f64 = 1e-10;
const COARSE_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemlFit {
    pub tau2: f64,
    pub mu_hat: f64,
    pub se_mu: f64,
    pub p_value: f64,
    pub significant: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau2Estimate {
    pub tau2: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub fn pairs(estimates: &[Estimate]) -> Vec<(f64, f64)> {
    estimates.iter().map(|e| (e.y, e.se)).collect()
}

fn check_pairs(data: &[(f64, f64)], min: usize) -> Result<()> {
    if data.len() < min {
        return Err(Error::invalid(format!(
            "need at least {min} estimates, got {}",
            data.len()
        )));
    }
    if let Some(&(y, se)) = data.iter().find(|(y, se)| !(y.is_finite() && *se > 0.0 && se.is_finite())) {
        return Err(Error::invalid(format!("invalid estimate ({y}, {se})")));
    }
    Ok(())
}

/// Restricted log-likelihood of the random-effects model at `tau2`, up to a
/// constant.
pub fn restricted_loglik(data: &[(f64, f64)], tau2: f64) -> f64 {
    let mut sum_w = 0.0;
    let mut sum_wy = 0.0;
    let mut log_det = 0.0;
    for &(y, se) in data {
        let v = se * se + tau2;
        sum_w += 1.0 / v;
        sum_wy += y / v;
        log_det += v.ln();
    }
    let mu = sum_wy / sum_w;
    let q: f64 = data
        .iter()
        .map(|&(y, se)| (y - mu).powi(2) / (se * se + tau2))
        .sum();
    -0.5 * (log_det + sum_w.ln() + q)
}

/// Derivative of [`restricted_loglik`] with respect to `tau2`.
fn restricted_score(data: &[(f64, f64)], tau2: f64) -> f64 {
    let w: Vec<f64> = data.iter().map(|&(_, se)| 1.0 / (se * se + tau2)).collect();
    let sum_w: f64 = w.iter().sum();
    let sum_w2: f64 = w.iter().map(|x| x * x).sum();
    let mu = data.iter().zip(&w).map(|(&(y, _), wi)| wi * y).sum::<f64>() / sum_w;
    let quad: f64 = data
        .iter()
        .zip(&w)
        .map(|(&(y, _), wi)| wi * wi * (y - mu).powi(2))
        .sum();
    0.5 * (quad - sum_w + sum_w2 / sum_w)
}

/// REML estimate of the between-study variance.
///
/// The search runs over `t = ln(tau2 + 1e-12)`: a coarse scan locates the
/// best bracket and golden-section search refines it. Bisection on the score
/// then removes the flat-top imprecision of the objective. A non-positive
/// score at zero returns the boundary solution.
pub fn reml_tau2(data: &[(f64, f64)]) -> Result<Tau2Estimate> {
    check_pairs(data, 2)?;
    if restricted_score(data, 0.0) <= 0.0 {
        return Ok(Tau2Estimate { tau2: 0.0, converged: true, iterations: 0 });
    }

    let n = data.len() as f64;
    let mean = data.iter().map(|d| d.0).sum::<f64>() / n;
    let var_y = data.iter().map(|d| (d.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let max_v = data.iter().map(|d| d.1 * d.1).fold(0.0, f64::max);
    let upper = 100.0 * (var_y + max_v);

    let objective = |t: f64| restricted_loglik(data, (t.exp() - LOG_EPS).max(0.0));
    let lo = LOG_EPS.ln();
    let hi = (upper + LOG_EPS).ln();
    let step = (hi - lo) / (COARSE_POINTS - 1) as f64;
    let (best, _) = (0..COARSE_POINTS)
        .map(|i| (i, objective(lo + step * i as f64)))
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });

    let mut a = lo + step * best.saturating_sub(1) as f64;
    let mut b = lo + step * (best + 1).min(COARSE_POINTS - 1) as f64;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d);
    let mut iterations = 0;
    while b - a > BRACKET_TOL && iterations < MAX_ITER {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
        iterations += 1;
    }
    let t = 0.5 * (a + b);
    let mut tau2 = (t.exp() - LOG_EPS).max(0.0);
    let width = 1e-4 * (tau2 + max_v);
    let (mut lo, mut hi) = ((tau2 - 4.0 * width).max(0.0), tau2 + 4.0 * width);
    if restricted_score(data, lo) > 0.0 && restricted_score(data, hi) < 0.0 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if restricted_score(data, mid) > 0.0 { lo = mid } else { hi = mid }
        }
        tau2 = 0.5 * (lo + hi);
    }
    // compare against the boundary in case the scan bracketed it
    let tau2 = if restricted_loglik(data, 0.0) > restricted_loglik(data, tau2) { 0.0 } else { tau2 };
    Ok(Tau2Estimate {
        tau2,
        converged: b - a <= BRACKET_TOL,
        iterations,
    })
}

/// Inverse-variance pooled estimate and its standard error.
pub fn pool(data: &[(f64, f64)], tau2: f64) -> Result<(f64, f64)> {
    check_pairs(data, 1)?;
    if !(tau2 >= 0.0) {
        return Err(Error::invalid(format!("tau2 must be non-negative, got {tau2}")));
    }
    let (sw, swy) = data.iter().fold((0.0, 0.0), |(sw, swy), &(y, se)| {
        let w = 1.0 / (se * se + tau2);
        (sw + w, swy + w * y)
    });
    Ok((swy / sw, 1.0 / sw.sqrt()))
}

/// Two-sided z test of the pooled effect.
pub fn wald_test(mu_hat: f64, se_mu: f64, alpha: f64) -> Result<(f64, bool)> {
    if !(se_mu > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("wald_test needs se_mu > 0 and 0 < alpha < 1"));
    }
    let p = (2.0 * norm_sf((mu_hat / se_mu).abs())).min(1.0);
    Ok((p, p < alpha))
}

pub fn unweighted_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("mean of empty input"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// REML random-effects fit with a Wald test at `alpha`.
pub fn fit_reml(data: &[(f64, f64)], alpha: f64) -> Result<RemlFit> {
    let est = reml_tau2(data)?;
    let (mu_hat, se_mu) = pool(data, est.tau2)?;
    let (p_value, significant) = wald_test(mu_hat, se_mu, alpha)?;
    Ok(RemlFit {
        tau2: est.tau2,
        mu_hat,
        se_mu,
        p_value,
        significant,
        converged: est.converged,
    })
}
