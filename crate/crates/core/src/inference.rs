//! Marginal likelihoods, posterior model probabilities, inclusion Bayes
//! factors and model-averaged effect estimates.
//!
//! Each model's free parameters are mapped to an unconstrained space (`mu`
//! as is, `tau`, PET and PEESE through logs, publication weights through a
//! stick-breaking logit). The log posterior kernel is then integrated
//!
//! * exactly when the model has no free parameters,
//! * by tensor Gauss-Legendre quadrature on a box around the mode, in
//!   coordinates whitened by the Laplace covariance, for one or two
//!   parameters,
//! * by importance sampling from a Student-t proposal centred on the mode
//!   with the Laplace covariance for three or more parameters.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dist::log_sum_exp;
use crate::effectsize::{Estimate, Metric};
use crate::ensemble::{log_prior_density, BiasComponent, LikelihoodKernel, ModelSpace, ModelSpec, Params};
use crate::error::{Error, Result};
use crate::optimize::{gradient, hessian, nelder_mead};
use crate::quadrature::{gauss_legendre_on, LegendreDensity};
use crate::remeta;
use crate::rng::CounterRng;

/// Drop in log density that bounds the quadrature box.
const BOX_DROP: f64 = 36.0;
const T_DOF: f64 = 5.0;
const PROPOSAL_INFLATION: f64 = 1.3;
/// Share of final draws taken from the Laplace proposal.
const DEFENSIVE_SHARE: f64 = 0.2;
const CI_GRID_POINTS: usize = 2048;
const CI_GRID_HALF_WIDTH_SD: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationSettings {
    pub quadrature_nodes: usize,
    pub is_samples: usize,
    pub seed: u64,
    pub rel_tol: f64,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        IntegrationSettings {
            quadrature_nodes: 64,
            is_samples: 20_000,
            seed: 0,
            rel_tol: 1e-6,
        }
    }
}

impl IntegrationSettings {
    pub fn with_seed(self, seed: u64) -> Self {
        IntegrationSettings { seed, ..self }
    }

    pub fn check(&self) -> Result<()> {
        if self.quadrature_nodes < 8 {
            return Err(Error::invalid("quadrature_nodes must be at least 8"));
        }
        if self.is_samples < 1000 {
            return Err(Error::invalid("is_samples must be at least 1000"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMethod {
    Exact,
    Quadrature,
    ImportanceSampling,
}

/// Position of each component in the unconstrained parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    effect: bool,
    heterogeneity: bool,
    n_intervals: usize,
    pet: bool,
    peese: bool,
    dim: usize,
}

fn log_sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        -(-a).exp().ln_1p()
    } else {
        a - a.exp().ln_1p()
    }
}

impl Layout {
    fn new(model: &ModelSpec) -> Self {
        let n_intervals = match &model.bias {
            BiasComponent::Selection(s) => s.n_intervals(),
            _ => 0,
        };
        Layout {
            effect: model.effect,
            heterogeneity: model.heterogeneity,
            n_intervals,
            pet: model.bias == BiasComponent::Pet,
            peese: model.bias == BiasComponent::Peese,
            dim: model.n_free(),
        }
    }

    /// Natural parameters and log-Jacobian at `x`.
    fn params(&self, x: &[f64]) -> (Params, f64) {
        let mut p = Params::default();
        let mut log_jac = 0.0;
        let mut i = 0;
        if self.effect {
            p.mu = x[i];
            i += 1;
        }
        if self.heterogeneity {
            p.tau = x[i].exp();
            log_jac += x[i];
            i += 1;
        }
        if self.n_intervals > 0 {
            // stick-breaking over the interval increments; the remaining
            // stick after j breaks is the weight of interval j
            let k = self.n_intervals;
            let mut omega = Vec::with_capacity(k);
            omega.push(1.0);
            let mut log_rest = 0.0;
            for j in 0..k - 1 {
                let a = x[i] - ((k - 1 - j) as f64).ln();
                let log_z = log_sigmoid(a);
                let log_1mz = log_sigmoid(-a);
                log_jac += log_rest + log_z + log_1mz;
                log_rest += log_1mz;
                omega.push(log_rest.exp());
                i += 1;
            }
            p.omega = omega;
        }
        if self.pet {
            p.pet = x[i].exp();
            log_jac += x[i];
        }
        if self.peese {
            p.peese = x[i].exp();
            log_jac += x[i];
        }
        (p, log_jac)
    }

    fn start(&self, start: &Start) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim);
        if self.effect {
            x.push(start.mu);
        }
        if self.heterogeneity {
            x.push(start.log_tau);
        }
        x.extend(std::iter::repeat_n(0.0, self.n_intervals.saturating_sub(1)));
        if self.pet || self.peese {
            x.push((0.3f64).ln());
        }
        x
    }

    fn steps(&self, start: &Start) -> Vec<f64> {
        let mut s = vec![0.5; self.dim];
        if self.effect {
            s[0] = start.mu_step;
        }
        s
    }
}

/// Data-driven starting point for mode search.
#[derive(Debug, Clone, Copy)]
struct Start {
    mu: f64,
    mu_step: f64,
    log_tau: f64,
}

impl Start {
    fn from_data(data: &[Estimate]) -> Self {
        let pairs = remeta::pairs(data);
        match remeta::fit_reml(&pairs, 0.05) {
            Ok(fit) => Start {
                mu: fit.mu_hat,
                mu_step: (2.0 * fit.se_mu).clamp(0.01, 0.5),
                log_tau: fit.tau2.sqrt().max(0.05).ln(),
            },
            Err(_) => Start { mu: 0.0, mu_step: 0.1, log_tau: 0.1f64.ln() },
        }
    }
}

struct Target<'a> {
    model: &'a ModelSpec,
    kernel: LikelihoodKernel,
    layout: Layout,
}

impl<'a> Target<'a> {
    fn new(model: &'a ModelSpec, data: &[Estimate]) -> Self {
        Target {
            model,
            kernel: LikelihoodKernel::new(model, data),
            layout: Layout::new(model),
        }
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let (p, log_jac) = self.layout.params(x);
        let lp = log_prior_density(self.model, &p);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        let v = lp + log_jac + self.kernel.log_lik(&p);
        if v.is_nan() { f64::NEG_INFINITY } else { v }
    }
}

/// Posterior distribution of the effect within one model.
#[derive(Debug, Clone, PartialEq)]
pub enum MuMarginal {
    /// `mu = offset + scale * sinh(v)` with a smooth density in `v`.
    Spectral { offset: f64, scale: f64, density: LegendreDensity },
    /// Weighted draws sorted by value, with cumulative normalized weights.
    Weighted { values: Vec<f64>, cum_weights: Vec<f64> },
}

impl MuMarginal {
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            MuMarginal::Spectral { offset, scale, density } => density.cdf(((x - offset) / scale).asinh()),
            MuMarginal::Weighted { values, cum_weights } => {
                let k = values.partition_point(|&v| v <= x);
                if k == 0 { 0.0 } else { cum_weights[k - 1] }
            }
        }
    }
}

/// Result of integrating one model.
#[derive(Debug, Clone)]
pub struct ModelIntegral {
    pub log_marginal: f64,
    pub error: f64,
    pub method: IntegrationMethod,
    pub posterior_mean: Params,
    /// Posterior mean of the effect expressed in Cohen's d.
    pub mean_d: f64,
    pub mu_marginal: Option<MuMarginal>,
}

struct Mode {
    x: Vec<f64>,
    chol: DMatrix<f64>,
}

fn find_mode(target: &Target, start: &Start) -> Result<Mode> {
    let layout = &target.layout;
    let neg = |x: &[f64]| -target.log_density(x);
    let x0 = layout.start(start);
    let steps = layout.steps(start);
    let budget = 300 * layout.dim * layout.dim + 200;
    let (mut x, _) = nelder_mead(&neg, &x0, &steps, budget, 1e-12);
    let small: Vec<f64> = steps.iter().map(|s| 0.1 * s).collect();
    let (x2, _) = nelder_mead(&neg, &x, &small, budget, 1e-13);
    x = x2;
    let mut value = target.log_density(&x);
    if !value.is_finite() {
        return Err(Error::numerical("log posterior is not finite at its mode"));
    }

    let mut h = vec![1e-3; layout.dim];
    let scaled_steps = |x: &[f64], h: &[f64]| -> Vec<f64> {
        let hess = hessian(&|p: &[f64]| target.log_density(p), x, h);
        (0..x.len())
            .map(|i| {
                let curv = -hess[(i, i)];
                let sd = if curv > 0.0 && curv.is_finite() { 1.0 / curv.sqrt() } else { 1.0 };
                (0.05 * sd).clamp(1e-6, 0.05)
            })
            .collect()
    };
    h = scaled_steps(&x, &h);

    // Newton polish of the simplex solution
    for _ in 0..6 {
        let hess = hessian(&|p: &[f64]| target.log_density(p), &x, &h);
        let Some(chol) = (-hess).cholesky() else { break };
        let g = gradient(&|p: &[f64]| target.log_density(p), &x, &h);
        let step = chol.solve(&g);
        let mut improved = false;
        let mut t = 1.0;
        for _ in 0..8 {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let v = target.log_density(&cand);
            if v > value {
                x = cand;
                value = v;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved || step.norm() * t < 1e-10 {
            break;
        }
    }

    let hess = hessian(&|p: &[f64]| target.log_density(p), &x, &h);
    let neg_hess = -hess;
    let chol = match neg_hess.clone().cholesky() {
        Some(c) => {
            let cov = c.inverse();
            cov.cholesky().map(|c| c.l())
        }
        None => None,
    };
    let chol = chol.unwrap_or_else(|| {
        DMatrix::from_fn(layout.dim, layout.dim, |i, j| {
            if i != j {
                return 0.0;
            }
            let curv = neg_hess[(i, i)];
            if curv > 0.0 && curv.is_finite() { 1.0 / curv.sqrt() } else { 1.0 }
        })
    });
    Ok(Mode { x, chol })
}

fn point_at(mode: &Mode, u: &[f64]) -> Vec<f64> {
    let u = DVector::from_column_slice(u);
    let shift = &mode.chol * u;
    mode.x.iter().zip(shift.iter()).map(|(a, b)| a + b).collect()
}

/// Gauss-Legendre rule on the real line adapted to one log density:
/// `t = center + scale * sinh(v)` with `v` covering the region within
/// `BOX_DROP` of the maximum. The sinh map compresses the exponential tails
/// that log and logit transforms produce.
#[derive(Debug, Clone, Copy)]
struct AxisRule {
    center: f64,
    scale: f64,
    v_lo: f64,
    v_hi: f64,
}

struct AxisNode {
    t: f64,
    /// Log weight in `t`, Jacobian included.
    log_w: f64,
    /// Gauss-Legendre weight in `v`.
    gl_w: f64,
}

impl AxisRule {
    fn locate(f: &dyn Fn(f64) -> f64) -> Option<Self> {
        let mut t = 0.0;
        let mut ft = f(t);
        if !ft.is_finite() {
            let found = (1..=40).flat_map(|k| [0.5 * k as f64, -0.5 * k as f64]).find_map(|c| {
                let v = f(c);
                v.is_finite().then_some((c, v))
            })?;
            (t, ft) = found;
        }
        // pattern search for the maximum
        let mut step = 0.5;
        for _ in 0..200 {
            if step < 1e-4 {
                break;
            }
            let (up, down) = (f(t + step), f(t - step));
            if up > ft && up >= down {
                t += step;
                ft = up;
                step *= 2.0;
            } else if down > ft {
                t -= step;
                ft = down;
                step *= 2.0;
            } else {
                step *= 0.25;
            }
        }
        let h = 1e-2;
        let curv = -(f(t + h) - 2.0 * ft + f(t - h)) / (h * h);
        let scale = if curv > 0.0 && curv.is_finite() { (1.0 / curv.sqrt()).clamp(1e-6, 1e6) } else { 1.0 };

        let floor = ft - BOX_DROP;
        let reach = |dir: f64| -> f64 {
            let inside = |r: f64| f(t + dir * scale * r) > floor;
            let mut r = 1.0;
            if !inside(r) {
                while r > 1e-6 && !inside(0.5 * r) {
                    r *= 0.5;
                }
                return r;
            }
            let mut step = 1.0;
            for k in 0..200 {
                r += step;
                if k >= 8 {
                    step *= 1.5;
                }
                if !inside(r) {
                    break;
                }
            }
            r
        };
        let (lo, hi) = (reach(-1.0), reach(1.0));
        Some(AxisRule { center: t, scale, v_lo: -lo.asinh(), v_hi: hi.asinh() })
    }

    fn nodes(&self, n: usize) -> Vec<AxisNode> {
        let (v, w) = gauss_legendre_on(n, self.v_lo, self.v_hi);
        v.iter()
            .zip(&w)
            .map(|(&v, &gl_w)| AxisNode {
                t: self.center + self.scale * v.sinh(),
                log_w: gl_w.ln() + self.scale.ln() + v.cosh().ln(),
                gl_w,
            })
            .collect()
    }
}

struct Accumulator {
    n_intervals: usize,
    mu: f64,
    tau: f64,
    omega: Vec<f64>,
    pet: f64,
    peese: f64,
    mean_d: f64,
}

impl Accumulator {
    fn new(layout: &Layout) -> Self {
        Accumulator {
            n_intervals: layout.n_intervals,
            mu: 0.0,
            tau: 0.0,
            omega: vec![0.0; layout.n_intervals],
            pet: 0.0,
            peese: 0.0,
            mean_d: 0.0,
        }
    }

    fn add(&mut self, w: f64, p: &Params) {
        self.mu += w * p.mu;
        self.tau += w * p.tau;
        for (a, b) in self.omega.iter_mut().zip(&p.omega) {
            *a += w * b;
        }
        self.pet += w * p.pet;
        self.peese += w * p.peese;
        self.mean_d += w * 2.0 * p.mu.sinh();
    }

    fn finish(self) -> (Params, f64) {
        let _ = self.n_intervals;
        (
            Params { mu: self.mu, tau: self.tau, omega: self.omega, pet: self.pet, peese: self.peese },
            self.mean_d,
        )
    }
}

/// Log integral over the last whitened axis with the leading coordinates
/// fixed, with the contributing nodes as `(u, log term)`.
type Slice = (f64, Vec<(Vec<f64>, f64)>);

fn inner_slice(h: &dyn Fn(&[f64]) -> f64, u0: f64, n: usize) -> Slice {
    let f = |t: f64| h(&[u0, t]);
    let Some(rule) = AxisRule::locate(&f) else {
        return (f64::NEG_INFINITY, Vec::new());
    };
    let points: Vec<(Vec<f64>, f64)> = rule.nodes(n).iter().map(|nd| (vec![u0, nd.t], f(nd.t) + nd.log_w)).collect();
    (log_sum_exp(points.iter().map(|p| p.1)), points)
}

/// Nested adaptive Gauss-Legendre over one or two whitened coordinates: the
/// inner axis is re-centred and re-bounded at every outer node, which
/// follows curved posterior ridges.
fn integrate_quadrature(target: &Target, mode: &Mode, n: usize) -> Result<ModelIntegral> {
    let layout = &target.layout;
    let h = |u: &[f64]| target.log_density(&point_at(mode, u));
    let slice = |t: f64, n: usize| -> Slice {
        if layout.dim == 1 {
            let v = h(&[t]);
            (v, vec![(vec![t], v)])
        } else {
            inner_slice(&h, t, n)
        }
    };
    let locate_n = n.min(16);
    let outer = AxisRule::locate(&|t| slice(t, locate_n).0).ok_or_else(|| Error::numerical("posterior has no finite mass"))?;
    let log_det: f64 = (0..layout.dim).map(|i| mode.chol[(i, i)].ln()).sum();

    let nodes = outer.nodes(n);
    let slices: Vec<Slice> = nodes.iter().map(|nd| slice(nd.t, n)).collect();
    let outer_terms: Vec<f64> = nodes.iter().zip(&slices).map(|(nd, s)| s.0 + nd.log_w).collect();
    let log_sum = log_sum_exp(outer_terms.iter().copied());
    if !log_sum.is_finite() {
        return Err(Error::numerical("quadrature sum is not finite"));
    }
    let log_z = log_sum + log_det;

    let mut acc = Accumulator::new(layout);
    for (nd, (_, points)) in nodes.iter().zip(&slices) {
        for (u, term) in points {
            let w = (term + nd.log_w - log_sum).exp();
            if w > 0.0 {
                acc.add(w, &layout.params(&point_at(mode, u)).0);
            }
        }
    }
    let (posterior_mean, mean_d) = acc.finish();
    let mu_marginal = layout.effect.then(|| {
        let values: Vec<f64> = nodes.iter().zip(&outer_terms).map(|(nd, t)| (t - log_sum).exp() / nd.gl_w).collect();
        let l00 = mode.chol[(0, 0)];
        MuMarginal::Spectral {
            offset: mode.x[0] + l00 * outer.center,
            scale: l00 * outer.scale,
            density: LegendreDensity::from_node_values(outer.v_lo, outer.v_hi, &values),
        }
    });

    let m = (n / 2).max(4);
    let coarse = log_sum_exp(outer.nodes(m).iter().map(|nd| slice(nd.t, m).0 + nd.log_w)) + log_det;
    Ok(ModelIntegral {
        log_marginal: log_z,
        error: (log_z - coarse).abs(),
        method: IntegrationMethod::Quadrature,
        posterior_mean,
        mean_d,
        mu_marginal,
    })
}

/// Multivariate t with `T_DOF` degrees of freedom.
struct TProposal {
    center: Vec<f64>,
    scale: DMatrix<f64>,
    log_norm: f64,
}

impl TProposal {
    fn new(center: Vec<f64>, scale: DMatrix<f64>) -> Self {
        let d = center.len() as f64;
        let log_det: f64 = (0..center.len()).map(|i| scale[(i, i)].ln()).sum();
        let log_norm = ln_gamma(0.5 * (T_DOF + d)) - ln_gamma(0.5 * T_DOF) - 0.5 * d * (T_DOF * std::f64::consts::PI).ln() - log_det;
        TProposal { center, scale, log_norm }
    }

    fn sample(&self, rng: &mut CounterRng) -> Vec<f64> {
        let chi = ChiSquared::new(T_DOF).expect("positive degrees of freedom");
        let z = DVector::from_fn(self.center.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let factor = (rng.sample::<f64, _>(chi) / T_DOF).sqrt();
        let shift = &self.scale * (z / factor);
        self.center.iter().zip(shift.iter()).map(|(a, b)| a + b).collect()
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let r = DVector::from_iterator(x.len(), x.iter().zip(&self.center).map(|(a, b)| a - b));
        let Some(u) = self.scale.solve_lower_triangular(&r) else { return f64::NEG_INFINITY };
        self.log_norm - 0.5 * (T_DOF + x.len() as f64) * (u.norm_squared() / T_DOF).ln_1p()
    }
}

/// Weighted mean and lower Cholesky factor of the weighted covariance.
fn weighted_moments(points: &[Vec<f64>], log_w: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    let ess = sum * sum / w.iter().map(|v| v * v).sum::<f64>();
    let d = points[0].len();
    if ess < 10.0 * d as f64 {
        return None;
    }
    let mut mean = vec![0.0; d];
    for (x, wi) in points.iter().zip(&w) {
        for (m, xi) in mean.iter_mut().zip(x) {
            *m += wi / sum * xi;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (x, wi) in points.iter().zip(&w) {
        let r = DVector::from_iterator(d, x.iter().zip(&mean).map(|(a, b)| a - b));
        cov += (wi / sum) * &r * r.transpose();
    }
    cov.cholesky().map(|c| (mean, c.l()))
}

/// Laplace-anchored importance sampling. A pilot run from the Laplace t
/// proposal estimates the posterior moments; the final draws come from a
/// defensive mixture of the Laplace proposal and a moment-matched one.
fn integrate_importance(target: &Target, mode: &Mode, settings: &IntegrationSettings) -> Result<ModelIntegral> {
    let layout = &target.layout;
    let mut rng = CounterRng::new(settings.seed, &[0x4953, target.model.id as u64]);
    let laplace = TProposal::new(mode.x.clone(), &mode.chol * PROPOSAL_INFLATION);

    let pilot: Vec<Vec<f64>> = (0..settings.is_samples / 4).map(|_| laplace.sample(&mut rng)).collect();
    let pilot_w: Vec<f64> = pilot.iter().map(|x| target.log_density(x) - laplace.log_pdf(x)).collect();
    let matched = weighted_moments(&pilot, &pilot_w).map(|(m, l)| TProposal::new(m, l * PROPOSAL_INFLATION));

    let s = settings.is_samples;
    let mut log_w = Vec::with_capacity(s);
    let mut points = Vec::with_capacity(s);
    let (ln_a, ln_b) = (DEFENSIVE_SHARE.ln(), (1.0 - DEFENSIVE_SHARE).ln());
    for i in 0..s {
        let x = match &matched {
            Some(q) if i as f64 >= DEFENSIVE_SHARE * s as f64 => q.sample(&mut rng),
            _ => laplace.sample(&mut rng),
        };
        let log_q = match &matched {
            Some(q) => {
                let (a, b) = (ln_a + laplace.log_pdf(&x), ln_b + q.log_pdf(&x));
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            }
            None => laplace.log_pdf(&x),
        };
        log_w.push(target.log_density(&x) - log_q);
        points.push(x);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numerical("all importance weights vanished"));
    }
    let w: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    let mean = sum / s as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s as f64 - 1.0);
    let log_z = max + mean.ln();
    let error = (var / s as f64).sqrt() / mean;

    let mut acc = Accumulator::new(layout);
    let mut draws = Vec::new();
    for (x, wi) in points.iter().zip(&w) {
        let p = layout.params(x).0;
        acc.add(wi / sum, &p);
        if layout.effect {
            draws.push((p.mu, wi / sum));
        }
    }
    let (posterior_mean, mean_d) = acc.finish();
    let mu_marginal = layout.effect.then(|| {
        draws.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cum = 0.0;
        let cum_weights = draws
            .iter()
            .map(|(_, w)| {
                cum += w;
                cum
            })
            .collect();
        MuMarginal::Weighted { values: draws.iter().map(|d| d.0).collect(), cum_weights }
    });
    Ok(ModelIntegral {
        log_marginal: log_z,
        error,
        method: IntegrationMethod::ImportanceSampling,
        posterior_mean,
        mean_d,
        mu_marginal,
    })
}

fn integrate_with_start(model: &ModelSpec, data: &[Estimate], settings: &IntegrationSettings, start: &Start) -> Result<ModelIntegral> {
    let target = Target::new(model, data);
    let layout = &target.layout;
    if layout.dim == 0 {
        let (p, _) = layout.params(&[]);
        let ll = target.log_density(&[]);
        if !ll.is_finite() {
            return Err(Error::numerical("log-likelihood is not finite"));
        }
        return Ok(ModelIntegral {
            log_marginal: ll,
            error: 0.0,
            method: IntegrationMethod::Exact,
            posterior_mean: p,
            mean_d: 0.0,
            mu_marginal: None,
        });
    }
    let mode = find_mode(&target, start)?;
    if layout.dim <= 2 {
        integrate_quadrature(&target, &mode, settings.quadrature_nodes)
    } else {
        integrate_importance(&target, &mode, settings)
    }
}

fn to_fisher_z(data: &[Estimate]) -> Result<Vec<Estimate>> {
    data.iter()
        .map(|e| {
            e.check()?;
            e.to_metric(Metric::FisherZ)
        })
        .collect()
}

/// Integrates one model over its free parameters. The data are converted to
/// Fisher's z; orientation is left untouched.
pub fn integrate_model(model: &ModelSpec, data: &[Estimate], settings: &IntegrationSettings) -> Result<ModelIntegral> {
    settings.check()?;
    if data.len() < 3 {
        return Err(Error::invalid("need at least three estimates"));
    }
    let z = to_fisher_z(data)?;
    integrate_with_start(model, &z, settings, &Start::from_data(&z))
}

/// Log marginal likelihood of one model and its error estimate.
pub fn log_marginal_likelihood(model: &ModelSpec, data: &[Estimate], settings: &IntegrationSettings) -> Result<(f64, f64)> {
    integrate_model(model, data, settings).map(|m| (m.log_marginal, m.error))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// One row of the model table.
///
/// `posterior_mean.mu` is reported in the original direction of the data;
/// publication weights and PET/PEESE coefficients refer to the oriented data
/// (see [`FitResult::flipped`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelResult {
    pub id: usize,
    pub label: String,
    pub effect: bool,
    pub heterogeneity: bool,
    pub bias: BiasComponent,
    pub prior_prob: f64,
    pub log_marginal: Option<f64>,
    pub mc_error: Option<f64>,
    pub method: Option<IntegrationMethod>,
    pub posterior_prob: f64,
    pub posterior_mean: Option<Params>,
    pub failure: Option<String>,
    #[serde(skip)]
    mu_marginal: Option<MuMarginal>,
    #[serde(skip)]
    mean_d: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub models: Vec<ModelResult>,
    pub n_estimates: usize,
    pub log_bf_effect: Option<f64>,
    pub log_bf_heterogeneity: Option<f64>,
    pub log_bf_psb: Option<f64>,
    pub log_bf_selection_given_psb: Option<f64>,
    pub post_effect: f64,
    pub post_heterogeneity: f64,
    pub post_psb: Option<f64>,
    /// Effect-present models only, Cohen's d.
    pub mu_conditional: Option<EffectSummary>,
    /// Effect-present models only, Fisher's z.
    pub mu_conditional_z: Option<EffectSummary>,
    /// All models, null models contributing a point mass at zero; Cohen's d.
    pub mu_averaged: EffectSummary,
    /// True when the data were sign-flipped so that the REML estimate is
    /// non-negative before fitting.
    pub flipped: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Effect,
    Heterogeneity,
    Psb,
    SelectionGivenPsb,
}

impl Partition {
    /// `Some(true)` for models in the partition, `Some(false)` for the
    /// complement, `None` for models outside the comparison.
    fn side(self, m: &ModelResult) -> Option<bool> {
        match self {
            Partition::Effect => Some(m.effect),
            Partition::Heterogeneity => Some(m.heterogeneity),
            Partition::Psb => Some(m.bias.is_present()),
            Partition::SelectionGivenPsb => match &m.bias {
                BiasComponent::Selection(_) => Some(true),
                BiasComponent::Pet | BiasComponent::Peese => Some(false),
                BiasComponent::None => None,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InclusionBf {
    pub log_bf: f64,
    /// One side of the partition has no posterior mass.
    pub degenerate: bool,
}

impl InclusionBf {
    pub fn bf(&self) -> f64 {
        self.log_bf.exp()
    }
}

/// Inclusion Bayes factor: posterior odds of the partition over prior odds,
/// computed in log space over the models that did not fail.
pub fn inclusion_bf(fit: &FitResult, partition: Partition) -> Result<InclusionBf> {
    let mut prior = [0.0f64; 2];
    let mut terms: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for m in &fit.models {
        let (Some(side), Some(lm)) = (partition.side(m), m.log_marginal) else { continue };
        let k = side as usize;
        prior[k] += m.prior_prob;
        terms[k].push(m.prior_prob.ln() + lm);
    }
    if !(prior[0] > 0.0 && prior[1] > 0.0) {
        return Err(Error::invalid(format!("{partition:?} partition lacks prior mass on one side")));
    }
    let log_in = log_sum_exp(terms[1].iter().copied());
    let log_out = log_sum_exp(terms[0].iter().copied());
    let log_bf = (log_in - log_out) - (prior[1].ln() - prior[0].ln());
    Ok(InclusionBf { log_bf, degenerate: !log_bf.is_finite() })
}

/// Quantile of a mixture of effect posteriors; `None` marginals are point
/// masses at zero.
fn mixture_quantile(parts: &[(f64, Option<&MuMarginal>)], q: f64, center: f64, half_width: f64) -> f64 {
    let cdf = |x: f64| -> f64 {
        parts
            .iter()
            .map(|(w, m)| w * match m {
                Some(m) => m.cdf(x),
                None => (x >= 0.0) as u8 as f64,
            })
            .sum()
    };
    let mut lo = center - half_width;
    let mut hi = center + half_width;
    while cdf(lo) > q && lo > -1e3 {
        lo -= 2.0 * half_width;
    }
    while cdf(hi) < q && hi < 1e3 {
        hi += 2.0 * half_width;
    }
    // bracket on the uniform grid, then bisect
    let step = (hi - lo) / (CI_GRID_POINTS - 1) as f64;
    let mut a = lo;
    let mut b = hi;
    for i in 0..CI_GRID_POINTS {
        let x = lo + step * i as f64;
        if cdf(x) >= q {
            b = x;
            a = if i == 0 { x } else { x - step };
            break;
        }
    }
    for _ in 0..200 {
        if b - a <= 1e-13 * (1.0 + a.abs()) {
            break;
        }
        let m = 0.5 * (a + b);
        if cdf(m) >= q {
            b = m;
        } else {
            a = m;
        }
    }
    0.5 * (a + b)
}

fn summarize_effect(
    parts: &[(f64, Option<&MuMarginal>, f64, f64)],
    flipped: bool,
    center: f64,
    half_width: f64,
) -> (EffectSummary, EffectSummary) {
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let mix: Vec<(f64, Option<&MuMarginal>)> = parts.iter().map(|p| (p.0 / total, p.1)).collect();
    let mean_z: f64 = parts.iter().map(|p| p.0 / total * p.2).sum();
    let mean_d: f64 = parts.iter().map(|p| p.0 / total * p.3).sum();
    let lo = mixture_quantile(&mix, 0.025, center, half_width);
    let hi = mixture_quantile(&mix, 0.975, center, half_width);
    let to_d = |z: f64| 2.0 * z.sinh();
    let (z, d) = (
        EffectSummary { mean: mean_z, ci_low: lo, ci_high: hi },
        EffectSummary { mean: mean_d, ci_low: to_d(lo), ci_high: to_d(hi) },
    );
    if flipped {
        let neg = |s: EffectSummary| EffectSummary { mean: -s.mean, ci_low: -s.ci_high, ci_high: -s.ci_low };
        (neg(z), neg(d))
    } else {
        (z, d)
    }
}

/// Conditional effect estimate (effect-present models only) in Cohen's d,
/// in the original direction of the data.
pub fn conditional_effect_estimate(fit: &FitResult) -> Result<EffectSummary> {
    fit.mu_conditional
        .ok_or_else(|| Error::numerical("no posterior mass on effect-present models"))
}

fn assemble(models: &[ModelSpec], integrals: &BTreeMap<usize, std::result::Result<ModelIntegral, String>>, n: usize, flipped: bool) -> Result<FitResult> {
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        let integral = integrals.get(&m.id).expect("every model integrated");
        let mut row = ModelResult {
            id: m.id,
            label: m.label(),
            effect: m.effect,
            heterogeneity: m.heterogeneity,
            bias: m.bias.clone(),
            prior_prob: m.prior_prob,
            log_marginal: None,
            mc_error: None,
            method: None,
            posterior_prob: 0.0,
            posterior_mean: None,
            failure: None,
            mu_marginal: None,
            mean_d: 0.0,
        };
        match integral {
            Ok(int) => {
                row.log_marginal = Some(int.log_marginal);
                row.mc_error = Some(int.error);
                row.method = Some(int.method);
                let mut mean = int.posterior_mean.clone();
                if flipped {
                    mean.mu = -mean.mu;
                }
                row.posterior_mean = Some(mean);
                row.mean_d = int.mean_d;
                row.mu_marginal = int.mu_marginal.clone();
            }
            Err(e) => {
                warnings.push(format!("model {} ({}) failed: {e}", m.id, m.label()));
                row.failure = Some(e.clone());
            }
        }
        rows.push(row);
    }
    let alive: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.prior_prob, r.log_marginal?))).collect();
    if alive.is_empty() {
        return Err(Error::numerical("every model failed"));
    }
    let prior_alive: f64 = alive.iter().map(|r| r.0).sum();
    let log_terms: Vec<f64> = alive.iter().map(|r| (r.0 / prior_alive).ln() + r.1).collect();
    let log_total = log_sum_exp(log_terms.iter().copied());
    for r in rows.iter_mut() {
        if let Some(lm) = r.log_marginal {
            r.posterior_prob = ((r.prior_prob / prior_alive).ln() + lm - log_total).exp();
        }
    }
    if alive.len() < rows.len() {
        warnings.push(format!("{} of {} models failed; priors renormalized", rows.len() - alive.len(), rows.len()));
    }

    let post_of = |f: &dyn Fn(&ModelResult) -> bool| rows.iter().filter(|r| f(r)).map(|r| r.posterior_prob).sum::<f64>();
    let post_effect = post_of(&|r| r.effect);
    let post_heterogeneity = post_of(&|r| r.heterogeneity);
    let has_bias = rows.iter().any(|r| r.bias.is_present());
    let post_psb = has_bias.then(|| post_of(&|r| r.bias.is_present()));

    let priors = &models[0].priors;
    let half_width = CI_GRID_HALF_WIDTH_SD * priors.mu_sd;
    // weights renormalized within the effect-present models in log space, so
    // the conditional estimate survives when their total mass underflows
    let effect_rows: Vec<(&ModelResult, f64)> = rows
        .iter()
        .filter(|r| r.effect && r.mu_marginal.is_some())
        .filter_map(|r| Some((r, r.prior_prob.ln() + r.log_marginal?)))
        .collect();
    let log_effect = log_sum_exp(effect_rows.iter().map(|e| e.1));
    let conditional: Vec<(f64, Option<&MuMarginal>, f64, f64)> = effect_rows
        .iter()
        .map(|&(r, lw)| {
            let mean_z = r.posterior_mean.as_ref().map(|p| if flipped { -p.mu } else { p.mu }).unwrap_or(0.0);
            ((lw - log_effect).exp(), r.mu_marginal.as_ref(), mean_z, r.mean_d)
        })
        .filter(|c| c.0 > 0.0)
        .collect();
    let (mu_conditional_z, mu_conditional) = if conditional.is_empty() {
        (None, None)
    } else {
        let (z, d) = summarize_effect(&conditional, flipped, priors.mu_mean, half_width);
        (Some(z), Some(d))
    };
    let averaged: Vec<(f64, Option<&MuMarginal>, f64, f64)> = rows
        .iter()
        .filter(|r| r.posterior_prob > 0.0)
        .map(|r| {
            let mean_z = r.posterior_mean.as_ref().map(|p| if flipped { -p.mu } else { p.mu }).unwrap_or(0.0);
            (r.posterior_prob, if r.effect { r.mu_marginal.as_ref() } else { None }, if r.effect { mean_z } else { 0.0 }, r.mean_d)
        })
        .collect();
    let (_, mu_averaged) = summarize_effect(&averaged, flipped, priors.mu_mean, half_width);

    let mut fit = FitResult {
        models: rows,
        n_estimates: n,
        log_bf_effect: None,
        log_bf_heterogeneity: None,
        log_bf_psb: None,
        log_bf_selection_given_psb: None,
        post_effect,
        post_heterogeneity,
        post_psb,
        mu_conditional,
        mu_conditional_z,
        mu_averaged,
        flipped,
        warnings,
    };
    fit.log_bf_effect = inclusion_bf(&fit, Partition::Effect).ok().map(|b| b.log_bf);
    fit.log_bf_heterogeneity = inclusion_bf(&fit, Partition::Heterogeneity).ok().map(|b| b.log_bf);
    fit.log_bf_psb = inclusion_bf(&fit, Partition::Psb).ok().map(|b| b.log_bf);
    fit.log_bf_selection_given_psb = inclusion_bf(&fit, Partition::SelectionGivenPsb).ok().map(|b| b.log_bf);
    Ok(fit)
}

/// Fisher's z data, re-oriented so that the REML pooled estimate is
/// non-negative. Returns the oriented data and whether it was flipped.
pub fn orient(data: &[Estimate]) -> Result<(Vec<Estimate>, bool)> {
    let mut z = to_fisher_z(data)?;
    let fit = remeta::fit_reml(&remeta::pairs(&z), 0.05)?;
    let flipped = fit.mu_hat < 0.0;
    if flipped {
        for e in &mut z {
            e.y = -e.y;
        }
    }
    Ok((z, flipped))
}

fn integrate_all(models: &[ModelSpec], data: &[Estimate], settings: &IntegrationSettings) -> BTreeMap<usize, std::result::Result<ModelIntegral, String>> {
    let start = Start::from_data(data);
    models
        .par_iter()
        .map(|m| (m.id, integrate_with_start(m, data, settings, &start).map_err(|e| e.to_string())))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn check_inputs(data: &[Estimate], space: &ModelSpace, settings: &IntegrationSettings) -> Result<()> {
    settings.check()?;
    if space.is_empty() {
        return Err(Error::invalid("empty model space"));
    }
    if data.len() < 3 {
        return Err(Error::invalid(format!("need at least three estimates, got {}", data.len())));
    }
    Ok(())
}

/// Fits the model-averaged ensemble.
pub fn fit_ensemble(data: &[Estimate], space: &ModelSpace, settings: &IntegrationSettings) -> Result<FitResult> {
    check_inputs(data, space, settings)?;
    let (z, flipped) = orient(data)?;
    let integrals = integrate_all(&space.models, &z, settings);
    assemble(&space.models, &integrals, z.len(), flipped)
}

/// Fits the ensemble restricted to its bias-free members.
pub fn unadjusted_fit(data: &[Estimate], space: &ModelSpace, settings: &IntegrationSettings) -> Result<FitResult> {
    fit_ensemble(data, &space.without_bias()?, settings)
}

/// Adjusted and unadjusted fits sharing the bias-free integrals.
pub fn fit_adjusted_and_unadjusted(data: &[Estimate], space: &ModelSpace, settings: &IntegrationSettings) -> Result<(FitResult, FitResult)> {
    check_inputs(data, space, settings)?;
    let unadjusted_space = space.without_bias()?;
    let (z, flipped) = orient(data)?;
    let integrals = integrate_all(&space.models, &z, settings);
    let adjusted = assemble(&space.models, &integrals, z.len(), flipped)?;
    let unadjusted = assemble(&unadjusted_space.models, &integrals, z.len(), flipped)?;
    Ok((adjusted, unadjusted))
}

/// Posterior mean relative publication probability at each one-sided p-value
/// (oriented data). Models without a selection component contribute 1.
pub fn publication_probability_curve(fit: &FitResult, p_grid: &[f64]) -> Result<Vec<f64>> {
    if p_grid.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::invalid("p grid must lie in (0, 1)"));
    }
    Ok(p_grid
        .iter()
        .map(|&p| {
            fit.models
                .iter()
                .filter(|m| m.posterior_prob > 0.0)
                .map(|m| {
                    let w = match (&m.bias, &m.posterior_mean) {
                        (BiasComponent::Selection(s), Some(mean)) => mean.omega[s.interval_of(p)],
                        _ => 1.0,
                    };
                    m.posterior_prob * w
                })
                .sum::<f64>()
        })
        .collect())
}

/// Posterior mean small-study shift `PET·se + PEESE·se²` (Fisher's z,
/// oriented data).
pub fn inflation_curve(fit: &FitResult, se_grid: &[f64]) -> Result<Vec<f64>> {
    if se_grid.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("se grid must be positive"));
    }
    Ok(se_grid
        .iter()
        .map(|&se| {
            fit.models
                .iter()
                .filter_map(|m| {
                    let mean = m.posterior_mean.as_ref()?;
                    let shift = match m.bias {
                        BiasComponent::Pet => mean.pet * se,
                        BiasComponent::Peese => mean.peese * se * se,
                        _ => 0.0,
                    };
                    Some(m.posterior_prob * shift)
                })
                .sum::<f64>()
        })
        .collect())
}

/// A Bayes factor carried in natural log, with `log10` and the raw value
/// when it is representable without loss (between 1e-15 and 1e15).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfValue {
    pub log: f64,
    pub log10: f64,
    pub value: Option<f64>,
}

impl BfValue {
    pub fn from_log(log: f64) -> Self {
        let log10 = log / std::f64::consts::LN_10;
        let value = (log10.abs() < 15.0).then(|| log.exp());
        BfValue { log, log10, value }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub failed_models: usize,
    pub max_mc_error: f64,
    pub warnings: Vec<String>,
}

/// The per-fit JSON document: adjusted and unadjusted fits side by side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub ma_id: String,
    pub n_estimates: usize,
    pub models: Vec<ModelResult>,
    pub bf_effect: Option<BfValue>,
    pub bf_effect_unadj: Option<BfValue>,
    pub bf_heterogeneity: Option<BfValue>,
    pub bf_psb: Option<BfValue>,
    pub bf_selection_given_psb: Option<BfValue>,
    pub post_effect_adj: f64,
    pub post_effect_unadj: f64,
    pub post_heterogeneity: f64,
    pub post_psb: Option<f64>,
    pub mu_conditional: Option<EffectSummary>,
    pub mu_conditional_unadj: Option<EffectSummary>,
    pub mu_averaged: EffectSummary,
    pub flipped: bool,
    pub diagnostics: Diagnostics,
}

impl FitReport {
    pub fn new(ma_id: impl Into<String>, adjusted: &FitResult, unadjusted: &FitResult) -> Self {
        let bf = |v: Option<f64>| v.map(BfValue::from_log);
        let failed_models = adjusted.models.iter().filter(|m| m.failure.is_some()).count();
        let max_mc_error = adjusted.models.iter().filter_map(|m| m.mc_error).fold(0.0, f64::max);
        FitReport {
            ma_id: ma_id.into(),
            n_estimates: adjusted.n_estimates,
            models: adjusted.models.clone(),
            bf_effect: bf(adjusted.log_bf_effect),
            bf_effect_unadj: bf(unadjusted.log_bf_effect),
            bf_heterogeneity: bf(adjusted.log_bf_heterogeneity),
            bf_psb: bf(adjusted.log_bf_psb),
            bf_selection_given_psb: bf(adjusted.log_bf_selection_given_psb),
            post_effect_adj: adjusted.post_effect,
            post_effect_unadj: unadjusted.post_effect,
            post_heterogeneity: adjusted.post_heterogeneity,
            post_psb: adjusted.post_psb,
            mu_conditional: adjusted.mu_conditional,
            mu_conditional_unadj: unadjusted.mu_conditional,
            mu_averaged: adjusted.mu_averaged,
            flipped: adjusted.flipped,
            diagnostics: Diagnostics { failed_models, max_mc_error, warnings: adjusted.warnings.clone() },
        }
    }
}
