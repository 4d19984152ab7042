//! The model-averaged ensemble: effect, heterogeneity and publication-bias
//! components, their priors and the per-model likelihoods.
//!
//! Every model describes observed estimates `y_n` with standard errors
//! `se_n` (Fisher's z) through `y_n ~ Normal(mu + b(se_n), tau² + se_n²)`.
//! Selection models additionally weight the density by a step function of the
//! estimate's p-value and renormalize; PET and PEESE shift the mean by a
//! non-negative multiple of `se` or `se²`.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dist::{norm_cdf, norm_logpdf, norm_ppf, norm_sf};
use crate::effectsize::Estimate;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sides {
    OneSided,
    TwoSided,
}

/// Cutpoints of a step weight function; the weights themselves are model
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScheme {
    pub sides: Sides,
    pub cutpoints: Vec<f64>,
}

impl SelectionScheme {
    pub fn new(sides: Sides, cutpoints: Vec<f64>) -> Result<Self> {
        let scheme = SelectionScheme { sides, cutpoints };
        scheme.check()?;
        Ok(scheme)
    }

    pub fn check(&self) -> Result<()> {
        if self.cutpoints.is_empty() {
            return Err(Error::invalid("weight function needs at least one cutpoint"));
        }
        if self.cutpoints.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return Err(Error::invalid("cutpoints must lie in (0, 1)"));
        }
        if self.cutpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("cutpoints must be strictly increasing"));
        }
        Ok(())
    }

    pub fn n_intervals(&self) -> usize {
        self.cutpoints.len() + 1
    }

    /// Index of the p-value interval containing the one-sided p-value `p`,
    /// 0 being the most significant. A p-value equal to a cutpoint belongs to
    /// the less significant side.
    pub fn interval_of(&self, p: f64) -> usize {
        let q = match self.sides {
            Sides::OneSided => p,
            Sides::TwoSided => 2.0 * p.min(1.0 - p),
        };
        self.cutpoints.iter().take_while(|&&c| c <= q).count()
    }

    fn interval_of_estimate(&self, y: f64, se: f64) -> usize {
        match self.sides {
            Sides::OneSided => self.interval_of(norm_sf(y / se)),
            Sides::TwoSided => {
                let q = (2.0 * norm_sf(y.abs() / se)).min(1.0);
                self.cutpoints.iter().take_while(|&&c| c <= q).count()
            }
        }
    }

    /// Effect-size thresholds corresponding to the cutpoints for a study
    /// with standard error `se`; decreasing for one-sided schemes, and
    /// thresholds on `|y|` for two-sided ones.
    fn thresholds(&self, se: f64) -> Vec<f64> {
        self.cutpoints
            .iter()
            .map(|&c| match self.sides {
                Sides::OneSided => -norm_ppf(c) * se,
                Sides::TwoSided => -norm_ppf(0.5 * c) * se,
            })
            .collect()
    }
}

impl fmt::Display for SelectionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sides = match self.sides {
            Sides::OneSided => "one-sided",
            Sides::TwoSided => "two-sided",
        };
        let cuts: Vec<String> = self.cutpoints.iter().map(|c| c.to_string()).collect();
        write!(f, "{sides}[{}]", cuts.join(","))
    }
}

/// A step function from p-value intervals to relative publication
/// probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    pub scheme: SelectionScheme,
    pub weights: Vec<f64>,
}

impl WeightFunction {
    pub fn new(sides: Sides, cutpoints: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let scheme = SelectionScheme::new(sides, cutpoints)?;
        if weights.len() != scheme.n_intervals() {
            return Err(Error::invalid(format!(
                "expected {} weights, got {}",
                scheme.n_intervals(),
                weights.len()
            )));
        }
        if weights[0] != 1.0 {
            return Err(Error::invalid("the most significant interval must have weight 1"));
        }
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::invalid("weights must lie in [0, 1]"));
        }
        Ok(WeightFunction { scheme, weights })
    }

    pub fn uniform(scheme: SelectionScheme) -> Self {
        let weights = vec![1.0; scheme.n_intervals()];
        WeightFunction { scheme, weights }
    }
}

/// Weight of the interval containing the one-sided p-value `p`.
pub fn weight_at(wf: &WeightFunction, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("p-value {p} outside (0, 1)")));
    }
    Ok(wf.weights[wf.scheme.interval_of(p)])
}

/// Probability of each p-value interval for `y ~ Normal(mu, s²)` given the
/// thresholds from [`SelectionScheme::thresholds`].
fn interval_probs(sides: Sides, thresholds: &[f64], mu: f64, s: f64, out: &mut Vec<f64>) {
    out.clear();
    let tail = |t: f64| match sides {
        Sides::OneSided => norm_sf((t - mu) / s),
        Sides::TwoSided => norm_sf((t - mu) / s) + norm_cdf((-t - mu) / s),
    };
    let mut prev = 0.0;
    for &t in thresholds {
        let cur = tail(t);
        out.push((cur - prev).max(0.0));
        prev = cur;
    }
    let last = thresholds[thresholds.len() - 1];
    let rest = match sides {
        Sides::OneSided => norm_cdf((last - mu) / s),
        Sides::TwoSided => (norm_cdf((last - mu) / s) - norm_cdf((-last - mu) / s)).max(0.0),
    };
    out.push(rest);
}

/// Normalizing constant of the selection density: the expected publication
/// weight of `y ~ Normal(mu, tau² + se²)`.
pub fn selection_normalizer(mu: f64, tau: f64, se: f64, wf: &WeightFunction) -> f64 {
    let s = (tau * tau + se * se).sqrt();
    let mut probs = Vec::with_capacity(wf.weights.len());
    interval_probs(wf.scheme.sides, &wf.scheme.thresholds(se), mu, s, &mut probs);
    probs.iter().zip(&wf.weights).map(|(p, w)| p * w).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasComponent {
    None,
    Selection(SelectionScheme),
    Pet,
    Peese,
}

impl BiasComponent {
    pub fn is_present(&self) -> bool {
        !matches!(self, BiasComponent::None)
    }

    pub fn is_selection(&self) -> bool {
        matches!(self, BiasComponent::Selection(_))
    }

    pub fn is_pet_peese(&self) -> bool {
        matches!(self, BiasComponent::Pet | BiasComponent::Peese)
    }

    pub fn n_free(&self) -> usize {
        match self {
            BiasComponent::None => 0,
            BiasComponent::Selection(s) => s.cutpoints.len(),
            BiasComponent::Pet | BiasComponent::Peese => 1,
        }
    }
}

impl fmt::Display for BiasComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BiasComponent::None => f.write_str("none"),
            BiasComponent::Selection(s) => write!(f, "selection:{s}"),
            BiasComponent::Pet => f.write_str("PET"),
            BiasComponent::Peese => f.write_str("PEESE"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub mu_mean: f64,
    pub mu_sd: f64,
    pub tau_shape: f64,
    pub tau_scale: f64,
    pub pet_scale: f64,
    pub peese_scale: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            mu_mean: 0.0,
            mu_sd: 1.0,
            tau_shape: 1.0,
            tau_scale: 0.15,
            pet_scale: 1.0,
            peese_scale: 5.0,
        }
    }
}

fn half_cauchy_logpdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    (2.0 / (std::f64::consts::PI * scale)).ln() - (x / scale).powi(2).ln_1p()
}

fn inv_gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// One member of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: usize,
    pub effect: bool,
    pub heterogeneity: bool,
    pub bias: BiasComponent,
    pub prior_prob: f64,
    pub priors: Priors,
}

impl ModelSpec {
    /// Number of free parameters to integrate over.
    pub fn n_free(&self) -> usize {
        self.effect as usize + self.heterogeneity as usize + self.bias.n_free()
    }

    pub fn label(&self) -> String {
        format!(
            "{} {} {}",
            if self.effect { "mu" } else { "mu=0" },
            if self.heterogeneity { "tau" } else { "tau=0" },
            self.bias
        )
    }
}

/// Parameter values of a model in their natural scale. Components absent from
/// the model are ignored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Params {
    pub mu: f64,
    pub tau: f64,
    /// Publication weights, most significant interval first.
    pub omega: Vec<f64>,
    pub pet: f64,
    pub peese: f64,
}

/// Prior log-density of `params` under `model`.
///
/// The publication weights follow a cumulative unit Dirichlet prior: the
/// interval increments are `Dirichlet(1, ..., 1)` and the weights are their
/// reversed cumulative sums, so that `1 = w_0 >= w_1 >= ... > 0` with
/// constant density `(J - 1)!` over that region.
pub fn log_prior_density(model: &ModelSpec, params: &Params) -> f64 {
    let p = &model.priors;
    let mut lp = 0.0;
    if model.effect {
        lp += norm_logpdf(params.mu, p.mu_mean, p.mu_sd);
    }
    if model.heterogeneity {
        lp += inv_gamma_logpdf(params.tau, p.tau_shape, p.tau_scale);
    }
    match &model.bias {
        BiasComponent::None => {}
        BiasComponent::Selection(scheme) => {
            let w = &params.omega;
            let ok = w.len() == scheme.n_intervals()
                && w[0] == 1.0
                && w.iter().all(|&x| x > 0.0)
                && w.windows(2).all(|pair| pair[1] <= pair[0]);
            if !ok {
                return f64::NEG_INFINITY;
            }
            lp += ln_gamma(scheme.n_intervals() as f64);
        }
        BiasComponent::Pet => lp += half_cauchy_logpdf(params.pet, p.pet_scale),
        BiasComponent::Peese => lp += half_cauchy_logpdf(params.peese, p.peese_scale),
    }
    lp
}

/// Precomputed per-estimate quantities for repeated likelihood evaluation
/// under one model.
#[derive(Debug, Clone)]
pub struct LikelihoodKernel {
    effect: bool,
    heterogeneity: bool,
    bias: BiasComponent,
    y: Vec<f64>,
    se: Vec<f64>,
    se2: Vec<f64>,
    interval: Vec<usize>,
    thresholds: Vec<Vec<f64>>,
}

impl LikelihoodKernel {
    pub fn new(model: &ModelSpec, data: &[Estimate]) -> Self {
        let y: Vec<f64> = data.iter().map(|e| e.y).collect();
        let se: Vec<f64> = data.iter().map(|e| e.se).collect();
        let se2 = se.iter().map(|s| s * s).collect();
        let (interval, thresholds) = match &model.bias {
            BiasComponent::Selection(scheme) => (
                y.iter().zip(&se).map(|(&y, &s)| scheme.interval_of_estimate(y, s)).collect(),
                se.iter().map(|&s| scheme.thresholds(s)).collect(),
            ),
            _ => (Vec::new(), Vec::new()),
        };
        LikelihoodKernel {
            effect: model.effect,
            heterogeneity: model.heterogeneity,
            bias: model.bias.clone(),
            y,
            se,
            se2,
            interval,
            thresholds,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn log_lik(&self, params: &Params) -> f64 {
        let mu = if self.effect { params.mu } else { 0.0 };
        let tau2 = if self.heterogeneity { params.tau * params.tau } else { 0.0 };
        let mut total = 0.0;
        match &self.bias {
            BiasComponent::None => {
                for i in 0..self.n() {
                    total += norm_logpdf(self.y[i], mu, (tau2 + self.se2[i]).sqrt());
                }
            }
            BiasComponent::Pet => {
                for i in 0..self.n() {
                    let m = mu + params.pet * self.se[i];
                    total += norm_logpdf(self.y[i], m, (tau2 + self.se2[i]).sqrt());
                }
            }
            BiasComponent::Peese => {
                for i in 0..self.n() {
                    let m = mu + params.peese * self.se2[i];
                    total += norm_logpdf(self.y[i], m, (tau2 + self.se2[i]).sqrt());
                }
            }
            BiasComponent::Selection(scheme) => {
                let omega = &params.omega;
                if omega.len() != scheme.n_intervals() {
                    return f64::NEG_INFINITY;
                }
                let mut probs = Vec::with_capacity(omega.len());
                for i in 0..self.n() {
                    let w = omega[self.interval[i]];
                    if !(w > 0.0) {
                        return f64::NEG_INFINITY;
                    }
                    let s = (tau2 + self.se2[i]).sqrt();
                    interval_probs(scheme.sides, &self.thresholds[i], mu, s, &mut probs);
                    let a: f64 = probs.iter().zip(omega).map(|(p, w)| p * w).sum();
                    total += w.ln() + norm_logpdf(self.y[i], mu, s) - a.ln();
                }
            }
        }
        total
    }
}

/// Log-likelihood of the estimates (Fisher's z) under `model` at `params`.
pub fn log_likelihood(model: &ModelSpec, params: &Params, data: &[Estimate]) -> f64 {
    LikelihoodKernel::new(model, data).log_lik(params)
}

/// Prior model probabilities and component priors of the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpaceConfig {
    pub priors: Priors,
    pub prior_effect: f64,
    pub prior_heterogeneity: f64,
    pub prior_bias: f64,
    /// Share of the bias-present mass given to selection models; the rest is
    /// split between PET and PEESE.
    pub selection_share: f64,
    pub weight_functions: Vec<SelectionScheme>,
}

impl Default for ModelSpaceConfig {
    fn default() -> Self {
        let one = |c: Vec<f64>| SelectionScheme { sides: Sides::OneSided, cutpoints: c };
        let two = |c: Vec<f64>| SelectionScheme { sides: Sides::TwoSided, cutpoints: c };
        ModelSpaceConfig {
            priors: Priors::default(),
            prior_effect: 0.5,
            prior_heterogeneity: 0.5,
            prior_bias: 0.5,
            selection_share: 0.5,
            weight_functions: vec![
                two(vec![0.05]),
                two(vec![0.05, 0.10]),
                one(vec![0.05]),
                one(vec![0.025, 0.05]),
                one(vec![0.05, 0.50]),
                one(vec![0.025, 0.05, 0.50]),
            ],
        }
    }
}

impl ModelSpaceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("prior_effect", self.prior_effect),
            ("prior_heterogeneity", self.prior_heterogeneity),
            ("prior_bias", self.prior_bias),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.selection_share) {
            return Err(Error::Config("selection_share must lie in [0, 1]".into()));
        }
        if self.weight_functions.is_empty() && self.selection_share > 0.0 {
            return Err(Error::Config("selection_share > 0 needs weight functions".into()));
        }
        for wf in &self.weight_functions {
            wf.check().map_err(|e| Error::Config(e.to_string()))?;
        }
        let p = &self.priors;
        if !(p.mu_sd > 0.0 && p.tau_shape > 0.0 && p.tau_scale > 0.0 && p.pet_scale > 0.0 && p.peese_scale > 0.0) {
            return Err(Error::Config("prior scales must be positive".into()));
        }
        Ok(())
    }
}

/// The list of ensemble members with prior model probabilities summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpace {
    pub models: Vec<ModelSpec>,
}

impl ModelSpace {
    pub fn from_config(cfg: &ModelSpaceConfig) -> Result<Self> {
        cfg.check()?;
        let n_sel = cfg.weight_functions.len();
        let mut biases: Vec<(BiasComponent, f64)> = vec![(BiasComponent::None, 1.0 - cfg.prior_bias)];
        if cfg.selection_share > 0.0 {
            let each = cfg.prior_bias * cfg.selection_share / n_sel as f64;
            biases.extend(cfg.weight_functions.iter().map(|s| (BiasComponent::Selection(s.clone()), each)));
        }
        if cfg.selection_share < 1.0 {
            let each = cfg.prior_bias * (1.0 - cfg.selection_share) / 2.0;
            biases.push((BiasComponent::Pet, each));
            biases.push((BiasComponent::Peese, each));
        }
        let mut models = Vec::new();
        for effect in [false, true] {
            let pe = if effect { cfg.prior_effect } else { 1.0 - cfg.prior_effect };
            for heterogeneity in [false, true] {
                let ph = if heterogeneity { cfg.prior_heterogeneity } else { 1.0 - cfg.prior_heterogeneity };
                for (bias, pb) in &biases {
                    models.push(ModelSpec {
                        id: models.len(),
                        effect,
                        heterogeneity,
                        bias: bias.clone(),
                        prior_prob: pe * ph * pb,
                        priors: cfg.priors,
                    });
                }
            }
        }
        Ok(ModelSpace { models })
    }

    /// Restriction to models satisfying `keep`, with prior probabilities
    /// renormalized; model ids are preserved.
    pub fn restricted(&self, keep: impl Fn(&ModelSpec) -> bool) -> Result<Self> {
        let mut models: Vec<ModelSpec> = self.models.iter().filter(|m| keep(m)).cloned().collect();
        let total: f64 = models.iter().map(|m| m.prior_prob).sum();
        if models.is_empty() || !(total > 0.0) {
            return Err(Error::invalid("restriction leaves no prior mass"));
        }
        for m in &mut models {
            m.prior_prob /= total;
        }
        Ok(ModelSpace { models })
    }

    /// The bias-free sub-ensemble used for unadjusted inference.
    pub fn without_bias(&self) -> Result<Self> {
        self.restricted(|m| !m.bias.is_present())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// The default 36-member ensemble.
pub fn default_model_space() -> ModelSpace {
    ModelSpace::from_config(&ModelSpaceConfig::default()).expect("default config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effectsize::Metric;
    use proptest::prelude::*;

    fn one_sided(cuts: Vec<f64>, w: Vec<f64>) -> WeightFunction {
        WeightFunction::new(Sides::OneSided, cuts, w).unwrap()
    }

    fn data(pairs: &[(f64, f64)]) -> Vec<Estimate> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(y, se))| Estimate::new(y, se, Metric::FisherZ, i.to_string()).unwrap())
            .collect()
    }

    /// Adaptive Simpson on a finite interval, independent of the closed-form
    /// interval probabilities.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, depth)
    }

    /// Integral over y split at the discontinuities of the weight function.
    fn integrate_over_y(f: &dyn Fn(f64) -> f64, mu: f64, s: f64, wf: &WeightFunction, se: f64) -> f64 {
        let mut breaks: Vec<f64> = Vec::new();
        for &c in &wf.scheme.cutpoints {
            match wf.scheme.sides {
                Sides::OneSided => breaks.push(se * norm_ppf(1.0 - c)),
                Sides::TwoSided => {
                    let t = se * norm_ppf(1.0 - c / 2.0);
                    breaks.push(t);
                    breaks.push(-t);
                }
            }
        }
        let lo = mu - 12.0 * s;
        let hi = mu + 12.0 * s;
        breaks.retain(|&b| b > lo && b < hi);
        breaks.push(lo);
        breaks.push(hi);
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.windows(2).map(|w| simpson(f, w[0], w[1], 1e-13, 40)).sum()
    }

    #[test]
    fn default_space_shape() {
        let space = default_model_space();
        assert_eq!(space.len(), 36);
        let total: f64 = space.models.iter().map(|m| m.prior_prob).sum();
        assert!((total - 1.0).abs() < 1e-15);
        let marginal = |f: &dyn Fn(&ModelSpec) -> bool| -> f64 {
            space.models.iter().filter(|m| f(m)).map(|m| m.prior_prob).sum()
        };
        assert!((marginal(&|m| m.bias.is_present()) - 0.5).abs() < 1e-15);
        assert!((marginal(&|m| m.effect) - 0.5).abs() < 1e-15);
        assert!((marginal(&|m| m.heterogeneity) - 0.5).abs() < 1e-15);
        assert!((marginal(&|m| m.bias.is_selection()) - 0.25).abs() < 1e-15);
        let mut schemes: Vec<String> = space
            .models
            .iter()
            .filter_map(|m| match &m.bias {
                BiasComponent::Selection(s) => Some(s.to_string()),
                _ => None,
            })
            .collect();
        schemes.sort();
        schemes.dedup();
        assert_eq!(schemes.len(), 6);
        let sel = space.models.iter().find(|m| m.bias.is_selection()).unwrap();
        assert!((sel.prior_prob - 1.0 / 96.0).abs() < 1e-15);
        let pet = space.models.iter().find(|m| m.bias == BiasComponent::Pet).unwrap();
        assert!((pet.prior_prob - 1.0 / 32.0).abs() < 1e-15);
        assert_eq!(space.without_bias().unwrap().len(), 4);
    }

    #[test]
    fn config_round_trip_through_toml() {
        let text = r#"
            prior_bias = 0.5
            selection_share = 1.0
            [priors]
            mu_sd = 0.5
            [[weight_functions]]
            sides = "one-sided"
            cutpoints = [0.05]
        "#;
        let cfg = ModelSpaceConfig::from_toml(text).unwrap();
        assert_eq!(cfg.priors.mu_sd, 0.5);
        assert_eq!(cfg.priors.tau_scale, 0.15);
        let space = ModelSpace::from_config(&cfg).unwrap();
        assert_eq!(space.len(), 8);
        assert!(ModelSpaceConfig::from_toml("prior_bias = 2.0").map(|c| ModelSpace::from_config(&c)).unwrap().is_err());
    }

    #[test]
    fn weight_at_examples() {
        let wf = one_sided(vec![0.05], vec![1.0, 0.3]);
        assert_eq!(weight_at(&wf, 0.01).unwrap(), 1.0);
        assert_eq!(weight_at(&wf, 0.10).unwrap(), 0.3);
        assert_eq!(weight_at(&wf, 0.05).unwrap(), 0.3);
        assert!(weight_at(&wf, 0.0).is_err());
        assert!(weight_at(&wf, 1.0).is_err());
        let flat = one_sided(vec![0.025, 0.05, 0.5], vec![1.0; 4]);
        for p in [0.001, 0.03, 0.3, 0.9] {
            assert_eq!(weight_at(&flat, p).unwrap(), 1.0);
        }
        let two = WeightFunction::new(Sides::TwoSided, vec![0.05], vec![1.0, 0.5]).unwrap();
        assert_eq!(weight_at(&two, 0.99).unwrap(), 1.0);
        assert_eq!(weight_at(&two, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn normalizer_examples() {
        let flat = one_sided(vec![0.05, 0.5], vec![1.0, 1.0, 1.0]);
        assert!((selection_normalizer(0.4, 0.2, 0.3, &flat) - 1.0).abs() < 1e-15);
        let hard = one_sided(vec![0.05], vec![1.0, 0.0]);
        assert!((selection_normalizer(0.0, 0.0, 1.0, &hard) - 0.05).abs() < 1e-14);
    }

    #[test]
    fn likelihood_examples() {
        let d = data(&[(0.1, 0.2), (0.3, 0.1), (-0.05, 0.15)]);
        let space = default_model_space();
        let null = &space.models[0];
        assert_eq!(null.n_free(), 0);
        let direct: f64 = d.iter().map(|e| norm_logpdf(e.y, 0.0, e.se)).sum();
        assert!((log_likelihood(null, &Params::default(), &d) - direct).abs() < 1e-14);

        let params = Params { mu: 0.2, tau: 0.1, omega: vec![1.0, 1.0, 1.0], pet: 0.0, peese: 0.0 };
        let plain = ModelSpec { bias: BiasComponent::None, ..space.models[27].clone() };
        let sel = ModelSpec {
            bias: BiasComponent::Selection(SelectionScheme::new(Sides::OneSided, vec![0.05, 0.5]).unwrap()),
            ..plain.clone()
        };
        let pet = ModelSpec { bias: BiasComponent::Pet, ..plain.clone() };
        let base = log_likelihood(&plain, &params, &d);
        assert!((log_likelihood(&sel, &params, &d) - base).abs() < 1e-13);
        assert_eq!(log_likelihood(&pet, &params, &d), base);
    }

    #[test]
    fn prior_examples() {
        let space = default_model_space();
        let effect_only = space.models.iter().find(|m| m.effect && !m.heterogeneity && !m.bias.is_present()).unwrap();
        let lp = log_prior_density(effect_only, &Params::default());
        assert!((lp + 0.918_938_533_204_672_8).abs() < 1e-15);
        let pet = space.models.iter().find(|m| !m.effect && !m.heterogeneity && m.bias == BiasComponent::Pet).unwrap();
        assert_eq!(log_prior_density(pet, &Params { pet: -0.1, ..Params::default() }), f64::NEG_INFINITY);
        assert!((log_prior_density(pet, &Params::default()) - (2.0 / std::f64::consts::PI).ln()).abs() < 1e-15);

        let sel = space
            .models
            .iter()
            .find(|m| !m.effect && !m.heterogeneity && matches!(&m.bias, BiasComponent::Selection(s) if s.cutpoints.len() == 1))
            .unwrap();
        for w in [0.01, 0.3, 0.99] {
            let lp = log_prior_density(sel, &Params { omega: vec![1.0, w], ..Params::default() });
            assert_eq!(lp, 0.0);
        }
        let bad = Params { omega: vec![1.0, 1.2], ..Params::default() };
        assert_eq!(log_prior_density(sel, &bad), f64::NEG_INFINITY);

        let het = space.models.iter().find(|m| m.heterogeneity && !m.effect && !m.bias.is_present()).unwrap();
        let tau: f64 = 0.2;
        let expected = 0.15f64.ln() - 2.0 * tau.ln() - 0.15 / tau;
        assert!((log_prior_density(het, &Params { tau, ..Params::default() }) - expected).abs() < 1e-14);
    }

    #[test]
    fn single_estimate_density_integrates_to_one() {
        let space = default_model_space();
        let se = 0.25;
        for model in &space.models {
            let params = Params {
                mu: if model.effect { 0.3 } else { 0.0 },
                tau: 0.2,
                omega: match &model.bias {
                    BiasComponent::Selection(s) => (0..s.n_intervals()).map(|j| 1.0 / (1.0 + j as f64)).collect(),
                    _ => vec![],
                },
                pet: 0.8,
                peese: 2.0,
            };
            let f = |y: f64| {
                let e = [Estimate { y, se, metric: Metric::FisherZ, study_id: String::new() }];
                log_likelihood(model, &params, &e).exp()
            };
            let wf = match &model.bias {
                BiasComponent::Selection(s) => WeightFunction { scheme: s.clone(), weights: params.omega.clone() },
                _ => WeightFunction::uniform(SelectionScheme::new(Sides::OneSided, vec![0.5]).unwrap()),
            };
            let s = (0.04f64 + se * se).sqrt();
            let total = integrate_over_y(&f, 2.0 * se, s, &wf, se);
            assert!((total - 1.0).abs() < 1e-8, "{} -> {}", model.label(), total);
        }
    }

    proptest! {
        #[test]
        fn normalizer_matches_quadrature(
            mu in -1.0f64..1.0,
            tau in 0.0f64..0.5,
            se in 0.05f64..0.5,
            which in 0usize..6,
            raw in proptest::collection::vec(0.01f64..1.0, 3),
        ) {
            let scheme = ModelSpaceConfig::default().weight_functions[which].clone();
            let mut w = vec![1.0];
            let mut sorted = raw.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            w.extend(sorted.into_iter().take(scheme.cutpoints.len()));
            let wf = WeightFunction { scheme, weights: w };
            let s = (tau * tau + se * se).sqrt();
            let f = |y: f64| {
                let p = norm_sf(y / se).clamp(1e-300, 1.0 - 1e-16);
                weight_at(&wf, p).unwrap() * (norm_logpdf(y, mu, s)).exp()
            };
            let quad = integrate_over_y(&f, mu, s, &wf, se);
            let a = selection_normalizer(mu, tau, se, &wf);
            prop_assert!(a > 0.0 && a <= 1.0 + 1e-15);
            prop_assert!((a - quad).abs() < 1e-8, "{} vs {}", a, quad);
        }

        #[test]
        fn interval_lookup_is_exhaustive(p in 1e-9f64..(1.0 - 1e-9), which in 0usize..6) {
            let scheme = &ModelSpaceConfig::default().weight_functions[which];
            let idx = scheme.interval_of(p);
            prop_assert!(idx < scheme.n_intervals());
        }

        #[test]
        fn cutpoint_ties_go_to_less_significant_side(which in 0usize..6, k in 0usize..3) {
            let scheme = &ModelSpaceConfig::default().weight_functions[which];
            let k = k.min(scheme.cutpoints.len() - 1);
            let c = scheme.cutpoints[k];
            let p = match scheme.sides { Sides::OneSided => c, Sides::TwoSided => c / 2.0 };
            prop_assert_eq!(scheme.interval_of(p), k + 1);
        }

        #[test]
        fn selection_converges_to_no_bias(eps in 1e-9f64..1e-3) {
            let d = data(&[(0.1, 0.2), (0.3, 0.1), (-0.05, 0.15), (0.5, 0.3)]);
            let space = default_model_space();
            let sel = space.models.iter().find(|m| m.effect && m.heterogeneity && m.bias.is_selection()).unwrap();
            let plain = ModelSpec { bias: BiasComponent::None, ..sel.clone() };
            let n = match &sel.bias { BiasComponent::Selection(s) => s.n_intervals(), _ => unreachable!() };
            let mut omega = vec![1.0; n];
            omega[n - 1] = 1.0 - eps;
            let params = Params { mu: 0.2, tau: 0.1, omega, ..Params::default() };
            let gap = (log_likelihood(sel, &params, &d) - log_likelihood(&plain, &params, &d)).abs();
            prop_assert!(gap < 10.0 * eps);
        }
    }
}
