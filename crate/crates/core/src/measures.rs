//! Per-meta-analysis footprint of publication selection: evidence inflation,
//! absolute bias and overestimation factors.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::effectsize::{Estimate, Metric};
use crate::ensemble::ModelSpace;
use crate::error::{Error, Result};
use crate::inference::{fit_adjusted_and_unadjusted, FitReport, FitResult, IntegrationSettings};
use crate::remeta;

/// Evidence inflation factor `BF_unadj / BF_adj`.
pub fn eif(bf_unadj: f64, bf_adj: f64) -> Result<f64> {
    if !(bf_unadj > 0.0 && bf_adj > 0.0) {
        return Err(Error::invalid("Bayes factors must be positive"));
    }
    Ok(bf_unadj / bf_adj)
}

pub fn log_eif(log_bf_unadj: f64, log_bf_adj: f64) -> f64 {
    log_bf_unadj - log_bf_adj
}

/// Standardized evidence inflation factor `EIF^(1/n)`.
pub fn seif(eif_log: f64, n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::invalid("n must be at least 1"));
    }
    Ok((eif_log / n as f64).exp())
}

pub fn absolute_bias(y_bar: f64, mu_adj: f64) -> f64 {
    y_bar - mu_adj
}

/// `y_bar / mu_adj`; `None` when the denominator is zero. Negative and
/// extreme ratios are passed through.
pub fn per_ma_of(y_bar: f64, mu_adj: f64) -> Option<f64> {
    (mu_adj != 0.0).then(|| y_bar / mu_adj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Ratio of means with a first-order delta-method 95% interval.
pub fn overestimation_factor(y_bars: &[f64], mu_adjs: &[f64]) -> Result<RatioEstimate> {
    if y_bars.len() != mu_adjs.len() {
        return Err(Error::invalid("lists differ in length"));
    }
    let k = y_bars.len();
    if k < 2 {
        return Err(Error::invalid("need at least two meta-analyses"));
    }
    let kf = k as f64;
    let a = y_bars.iter().sum::<f64>() / kf;
    let b = mu_adjs.iter().sum::<f64>() / kf;
    if b.abs() < 1e-12 {
        return Err(Error::numerical("mean adjusted effect is zero"));
    }
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (y, m) in y_bars.iter().zip(mu_adjs) {
        saa += (y - a) * (y - a);
        sbb += (m - b) * (m - b);
        sab += (y - a) * (m - b);
    }
    let (var_a, var_b, cov) = (saa / (kf - 1.0) / kf, sbb / (kf - 1.0) / kf, sab / (kf - 1.0) / kf);
    let var = var_a / (b * b) + a * a * var_b / b.powi(4) - 2.0 * a * cov / b.powi(3);
    let se = var.max(0.0).sqrt();
    let estimate = a / b;
    Ok(RatioEstimate { estimate, se, ci_low: estimate - 1.959_963_984_540_054 * se, ci_high: estimate + 1.959_963_984_540_054 * se })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceLabel {
    StrongNull,
    ModerateNull,
    WeakNull,
    Weak,
    Moderate,
    Strong,
}

impl EvidenceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceLabel::StrongNull => "strong-null",
            EvidenceLabel::ModerateNull => "moderate-null",
            EvidenceLabel::WeakNull => "weak-null",
            EvidenceLabel::Weak => "weak",
            EvidenceLabel::Moderate => "moderate",
            EvidenceLabel::Strong => "strong",
        }
    }
}

impl fmt::Display for EvidenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Verbal evidence category, bins closed on the left.
pub fn evidence_label(bf: f64) -> Result<EvidenceLabel> {
    if !(bf > 0.0) {
        return Err(Error::invalid(format!("Bayes factor must be positive, got {bf}")));
    }
    Ok(if bf < 0.1 {
        EvidenceLabel::StrongNull
    } else if bf < 1.0 / 3.0 {
        EvidenceLabel::ModerateNull
    } else if bf < 1.0 {
        EvidenceLabel::WeakNull
    } else if bf < 3.0 {
        EvidenceLabel::Weak
    } else if bf < 10.0 {
        EvidenceLabel::Moderate
    } else {
        EvidenceLabel::Strong
    })
}

/// As [`evidence_label`] for a natural-log Bayes factor of any magnitude.
pub fn evidence_label_log(log_bf: f64) -> Result<EvidenceLabel> {
    if log_bf.is_nan() {
        return Err(Error::invalid("log Bayes factor is NaN"));
    }
    if log_bf.abs() < 700.0 {
        evidence_label(log_bf.exp())
    } else if log_bf > 0.0 {
        Ok(EvidenceLabel::Strong)
    } else {
        Ok(EvidenceLabel::StrongNull)
    }
}

/// One CSV row per meta-analysis. Effect sizes are in Cohen's d and in the
/// original direction of the data; Bayes factors are natural logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSet {
    pub ma_id: String,
    pub field: String,
    pub n_estimates: usize,
    pub y_bar: f64,
    pub mu_adj: f64,
    pub mu_adj_ci_low: f64,
    pub mu_adj_ci_high: f64,
    pub mu_unadj: f64,
    pub bias: f64,
    pub of_k: Option<f64>,
    pub log_bf_effect_adj: f64,
    pub log_bf_effect_unadj: f64,
    pub log_bf_psb: f64,
    pub log_eif: f64,
    pub seif: f64,
    pub post_effect_adj: f64,
    pub post_effect_unadj: f64,
    pub post_psb: f64,
    pub label_bf_adj: EvidenceLabel,
    pub label_bf_unadj: EvidenceLabel,
    pub label_bf_psb: EvidenceLabel,
    pub reml_tau2: f64,
    pub reml_mu: f64,
    pub reml_p: f64,
    pub reml_significant: bool,
    pub reml_converged: bool,
    pub flipped: bool,
    pub failed_models: usize,
}

impl MeasureSet {
    /// Measures from an adjusted fit and its unadjusted counterpart on the
    /// same estimates.
    pub fn from_fits(ma_id: &str, field: &str, data: &[Estimate], adjusted: &FitResult, unadjusted: &FitResult) -> Result<MeasureSet> {
        let n = data.len();
        if n < 3 {
            return Err(Error::invalid("need at least three estimates"));
        }
        let d: Vec<f64> = data.iter().map(|e| e.to_metric(Metric::CohenD).map(|e| e.y)).collect::<Result<_>>()?;
        let y_bar = remeta::unweighted_mean(&d)?;
        let missing = |what: &str| Error::numerical(format!("{what} is undefined for {ma_id}"));
        let adj = adjusted.mu_conditional.ok_or_else(|| missing("adjusted effect"))?;
        let unadj = unadjusted.mu_conditional.ok_or_else(|| missing("unadjusted effect"))?;
        let log_bf_adj = adjusted.log_bf_effect.ok_or_else(|| missing("adjusted BF"))?;
        let log_bf_unadj = unadjusted.log_bf_effect.ok_or_else(|| missing("unadjusted BF"))?;
        let log_bf_psb = adjusted.log_bf_psb.ok_or_else(|| missing("PSB BF"))?;
        let leif = log_eif(log_bf_unadj, log_bf_adj);

        let z: Vec<Estimate> = data.iter().map(|e| e.to_metric(Metric::FisherZ)).collect::<Result<_>>()?;
        let reml = remeta::fit_reml(&remeta::pairs(&z), 0.05)?;

        Ok(MeasureSet {
            ma_id: ma_id.to_string(),
            field: field.to_string(),
            n_estimates: n,
            y_bar,
            mu_adj: adj.mean,
            mu_adj_ci_low: adj.ci_low,
            mu_adj_ci_high: adj.ci_high,
            mu_unadj: unadj.mean,
            bias: absolute_bias(y_bar, adj.mean),
            of_k: per_ma_of(y_bar, adj.mean),
            log_bf_effect_adj: log_bf_adj,
            log_bf_effect_unadj: log_bf_unadj,
            log_bf_psb,
            log_eif: leif,
            seif: seif(leif, n)?,
            post_effect_adj: adjusted.post_effect,
            post_effect_unadj: unadjusted.post_effect,
            post_psb: adjusted.post_psb.unwrap_or(0.0),
            label_bf_adj: evidence_label_log(log_bf_adj)?,
            label_bf_unadj: evidence_label_log(log_bf_unadj)?,
            label_bf_psb: evidence_label_log(log_bf_psb)?,
            reml_tau2: reml.tau2,
            reml_mu: 2.0 * reml.mu_hat.sinh(),
            reml_p: reml.p_value,
            reml_significant: reml.significant,
            reml_converged: reml.converged,
            flipped: adjusted.flipped,
            failed_models: adjusted.models.iter().filter(|m| m.failure.is_some()).count(),
        })
    }
}

/// Fits one meta-analysis and derives its measures and report.
pub fn analyze(ma_id: &str, field: &str, data: &[Estimate], space: &ModelSpace, settings: &IntegrationSettings) -> Result<(MeasureSet, FitReport)> {
    let (adjusted, unadjusted) = fit_adjusted_and_unadjusted(data, space, settings)?;
    let measures = MeasureSet::from_fits(ma_id, field, data, &adjusted, &unadjusted)?;
    Ok((measures, FitReport::new(ma_id, &adjusted, &unadjusted)))
}

pub fn write_measures_csv<W: std::io::Write>(rows: &[MeasureSet], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_measures_csv<R: std::io::Read>(input: R) -> Result<Vec<MeasureSet>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for r in rd.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}
