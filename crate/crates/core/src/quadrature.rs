//! Gauss-Legendre rules and Legendre-series representations of densities
//! sampled at Gauss-Legendre nodes.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_and_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss-Legendre rule mapped to `[lo, hi]`.
pub fn gauss_legendre_on(n: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    (
        x.iter().map(|t| mid + half * t).collect(),
        w.iter().map(|v| v * half).collect(),
    )
}

/// A probability density on `[lo, hi]` expanded in Legendre polynomials from
/// its values at the Gauss-Legendre nodes, giving a smooth CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct LegendreDensity {
    lo: f64,
    hi: f64,
    coeffs: Vec<f64>,
}

impl LegendreDensity {
    /// `values[i]` is the density at the `i`-th node of
    /// `gauss_legendre_on(values.len(), lo, hi)`.
    pub fn from_node_values(lo: f64, hi: f64, values: &[f64]) -> Self {
        let n = values.len();
        let (t, w) = gauss_legendre(n);
        let half = 0.5 * (hi - lo);
        let mut coeffs = vec![0.0; n];
        let mut p = vec![0.0; n];
        for i in 0..n {
            legendre_table(t[i], &mut p);
            let g = values[i] * half * w[i];
            for (k, c) in coeffs.iter_mut().enumerate() {
                *c += g * p[k];
            }
        }
        for (k, c) in coeffs.iter_mut().enumerate() {
            *c *= (2 * k + 1) as f64 / 2.0;
        }
        LegendreDensity { lo, hi, coeffs }
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        if x >= self.hi {
            return 2.0 * self.coeffs[0];
        }
        let t = (2.0 * x - self.lo - self.hi) / (self.hi - self.lo);
        let n = self.coeffs.len();
        let mut p = vec![0.0; n + 1];
        legendre_table(t, &mut p);
        let mut acc = self.coeffs[0] * (t + 1.0);
        for k in 1..n {
            acc += self.coeffs[k] * (p[k + 1] - p[k - 1]) / (2 * k + 1) as f64;
        }
        acc.clamp(0.0, 1.0)
    }
}

fn legendre_table(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for k in 2..out.len() {
        out[k] = ((2 * k - 1) as f64 * x * out[k - 1] - (k - 1) as f64 * out[k - 2]) / k as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::norm_cdf;

    #[test]
    fn rules_integrate_polynomials_exactly() {
        for n in [1, 2, 5, 16, 64, 128] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            let deg = 2 * n - 2;
            let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
            let exact = 2.0 / (deg as f64 + 1.0);
            assert!((approx - exact).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn gaussian_integral_on_wide_interval() {
        let (x, w) = gauss_legendre_on(64, -9.0, 9.0);
        let v: f64 = x.iter().zip(&w).map(|(x, w)| w * (-0.5 * x * x).exp()).sum();
        assert!((v - (2.0 * PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spectral_cdf_of_a_normal() {
        let (lo, hi) = (-9.0, 9.0);
        let (x, _) = gauss_legendre_on(64, lo, hi);
        let dens: Vec<f64> = x.iter().map(|x| (-0.5 * x * x).exp() / (2.0 * PI).sqrt()).collect();
        let ld = LegendreDensity::from_node_values(lo, hi, &dens);
        for q in [-3.0, -1.96, -0.3, 0.0, 1.0, 2.5] {
            assert!((ld.cdf(q) - norm_cdf(q)).abs() < 1e-11, "{q}");
        }
        assert_eq!(ld.cdf(-20.0), 0.0);
    }
}
