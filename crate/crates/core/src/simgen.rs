//! Synthetic meta-analyses with a known effect and a configurable
//! publication filter on one-sided p-values.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effectsize::{one_sided_p, Metric};
use crate::ensemble::{weight_at, Sides, WeightFunction};
use crate::error::{Error, Result};
use crate::ingest::{Dataset, MetaAnalysis};
use crate::rng::CounterRng;

/// Draws per meta-analysis before giving up on an extreme filter.
pub const MAX_DRAWS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default = "one_sided")]
    pub sides: Sides,
    pub cutpoints: Vec<f64>,
    pub weights: Vec<f64>,
}

fn one_sided() -> Sides {
    Sides::OneSided
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Mean effect in Cohen's d.
    pub true_mu: f64,
    /// Between-study standard deviation in Cohen's d.
    pub true_tau: f64,
    /// Inclusive range of published studies per meta-analysis.
    pub n_studies: [usize; 2],
    /// Inclusive range of the per-arm sample size.
    pub n_per_arm: [u64; 2],
    /// Overrides the sample-size based standard error.
    pub fixed_se: Option<f64>,
    /// Publication probability by p-value; `None` publishes everything.
    pub selection: Option<SelectionConfig>,
    pub n_mas: usize,
    pub seed: u64,
    pub field: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            true_mu: 0.0,
            true_tau: 0.0,
            n_studies: [10, 30],
            n_per_arm: [10, 100],
            fixed_se: None,
            selection: None,
            n_mas: 10,
            seed: 0,
            field: "simulated".to_string(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn weight_function(&self) -> Result<Option<WeightFunction>> {
        self.selection.as_ref().map(|s| WeightFunction::new(s.sides, s.cutpoints.clone(), s.weights.clone())).transpose()
    }

    pub fn check(&self) -> Result<()> {
        if !self.true_mu.is_finite() || !(self.true_tau >= 0.0 && self.true_tau.is_finite()) {
            return Err(Error::invalid("true_mu must be finite and true_tau non-negative"));
        }
        if self.n_studies[0] < 1 || self.n_studies[0] > self.n_studies[1] {
            return Err(Error::invalid("n_studies must be a non-empty range of positive counts"));
        }
        if self.n_per_arm[0] < 2 || self.n_per_arm[0] > self.n_per_arm[1] {
            return Err(Error::invalid("n_per_arm must be a non-empty range starting at 2 or more"));
        }
        if let Some(se) = self.fixed_se {
            if !(se > 0.0 && se.is_finite()) {
                return Err(Error::invalid("fixed_se must be positive"));
            }
        }
        self.weight_function()?;
        Ok(())
    }
}

/// Ground truth for one simulated meta-analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub ma_id: String,
    pub true_mu: f64,
    pub true_tau: f64,
    pub published: usize,
    pub draws: u64,
    pub rejected: u64,
}

pub fn ma_id(index: usize) -> String {
    format!("SIM{:05}", index + 1)
}

/// Standard error of a standardized mean difference with `n` per arm.
pub fn smd_se(d: f64, n: u64) -> f64 {
    let n = n as f64;
    (2.0 / n + d * d / (4.0 * n)).sqrt()
}

/// One draw before the publication filter: `(y, se, n per arm)`.
fn draw_study(cfg: &SimConfig, rng: &mut CounterRng) -> (f64, f64, u64) {
    let n = rng.random_range(cfg.n_per_arm[0]..=cfg.n_per_arm[1]);
    let theta = cfg.true_mu + cfg.true_tau * rng.sample::<f64, _>(StandardNormal);
    let se = cfg.fixed_se.unwrap_or_else(|| smd_se(theta, n));
    let y = theta + se * rng.sample::<f64, _>(StandardNormal);
    (y, se, n)
}

fn published(wf: Option<&WeightFunction>, y: f64, se: f64, u: f64) -> Result<bool> {
    let Some(wf) = wf else { return Ok(true) };
    let p = one_sided_p(y, se)?.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    Ok(u < weight_at(wf, p)?)
}

/// Simulates meta-analysis `index` of the corpus keyed by `seed`. Random
/// streams are keyed by (seed, index) for the study count and by
/// (seed, index, study, draw) for each attempt.
pub fn simulate_ma(cfg: &SimConfig, index: usize, seed: u64) -> Result<(MetaAnalysis, Truth)> {
    cfg.check()?;
    let wf = cfg.weight_function()?;
    let id = ma_id(index);
    let mut head = CounterRng::new(seed, &[index as u64]);
    let target = head.random_range(cfg.n_studies[0]..=cfg.n_studies[1]);
    let mut ma = MetaAnalysis::new(id.clone(), cfg.field.clone());
    let mut draws = 0u64;
    for study in 0..target {
        let mut attempt = 0u64;
        loop {
            if draws >= MAX_DRAWS {
                return Err(Error::numerical(format!("{id}: no publication after {MAX_DRAWS} draws")));
            }
            draws += 1;
            let mut rng = CounterRng::new(seed, &[index as u64, study as u64, attempt]);
            attempt += 1;
            let (y, se, n) = draw_study(cfg, &mut rng);
            if published(wf.as_ref(), y, se, rng.random::<f64>())? {
                ma.push(format!("s{:03}", study + 1), y, se, Metric::CohenD, 0, Some(n));
                break;
            }
        }
    }
    let truth = Truth {
        ma_id: id,
        true_mu: cfg.true_mu,
        true_tau: cfg.true_tau,
        published: target,
        draws,
        rejected: draws - target as u64,
    };
    Ok((ma, truth))
}

/// Simulates `cfg.n_mas` meta-analyses in parallel; the result does not
/// depend on scheduling.
pub fn simulate_corpus(cfg: &SimConfig, seed: u64) -> Result<(Dataset, Vec<Truth>)> {
    cfg.check()?;
    let results: Vec<Result<(MetaAnalysis, Truth)>> = (0..cfg.n_mas).into_par_iter().map(|i| simulate_ma(cfg, i, seed)).collect();
    let mut ds = Dataset::default();
    let mut truths = Vec::with_capacity(cfg.n_mas);
    for r in results {
        let (ma, t) = r?;
        ds.meta_analyses.push(ma);
        truths.push(t);
    }
    Ok((ds, truths))
}
