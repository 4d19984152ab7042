//! Field-level and study-count-binned summaries of per-meta-analysis
//! measures, and kernel density data for violin plots.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{overestimation_factor, MeasureSet, RatioEstimate};

const Z975: f64 = 1.959_963_984_540_054;

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

/// Median with interquartile range, and mean with a normal 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub count: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let (mean, sd) = mean_sd(&v);
        let half = sd.map(|s| Z975 * s / (v.len() as f64).sqrt());
        Some(Stat {
            count: v.len(),
            median: quantile_sorted(&v, 0.5),
            q25: quantile_sorted(&v, 0.25),
            q75: quantile_sorted(&v, 0.75),
            mean,
            ci_low: half.map(|h| mean - h),
            ci_high: half.map(|h| mean + h),
        })
    }
}

/// A per-meta-analysis quantity that can be summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    NEstimates,
    YBar,
    MuAdj,
    MuUnadj,
    Bias,
    OfK,
    LogEif,
    Seif,
    PostEffectAdj,
    PostEffectUnadj,
    PostPsb,
    RemlSignificant,
}

impl Measure {
    pub const ALL: [Measure; 12] = [
        Measure::NEstimates,
        Measure::YBar,
        Measure::MuAdj,
        Measure::MuUnadj,
        Measure::Bias,
        Measure::OfK,
        Measure::LogEif,
        Measure::Seif,
        Measure::PostEffectAdj,
        Measure::PostEffectUnadj,
        Measure::PostPsb,
        Measure::RemlSignificant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::NEstimates => "n_estimates",
            Measure::YBar => "y_bar",
            Measure::MuAdj => "mu_adj",
            Measure::MuUnadj => "mu_unadj",
            Measure::Bias => "bias",
            Measure::OfK => "of_k",
            Measure::LogEif => "log_eif",
            Measure::Seif => "seif",
            Measure::PostEffectAdj => "post_effect_adj",
            Measure::PostEffectUnadj => "post_effect_unadj",
            Measure::PostPsb => "post_psb",
            Measure::RemlSignificant => "reml_significant",
        }
    }

    /// Value for one row; `None` when undefined (a zero-denominator OF, or
    /// significance from a non-converged REML fit).
    pub fn value(self, r: &MeasureSet) -> Option<f64> {
        Some(match self {
            Measure::NEstimates => r.n_estimates as f64,
            Measure::YBar => r.y_bar,
            Measure::MuAdj => r.mu_adj,
            Measure::MuUnadj => r.mu_unadj,
            Measure::Bias => r.bias,
            Measure::OfK => return r.of_k,
            Measure::LogEif => r.log_eif,
            Measure::Seif => r.seif,
            Measure::PostEffectAdj => r.post_effect_adj,
            Measure::PostEffectUnadj => r.post_effect_unadj,
            Measure::PostPsb => r.post_psb,
            Measure::RemlSignificant => {
                if !r.reml_converged {
                    return None;
                }
                r.reml_significant as u8 as f64
            }
        })
    }

    fn values(self, rows: &[&MeasureSet]) -> Vec<f64> {
        rows.iter().filter_map(|r| self.value(r)).filter(|v| v.is_finite()).collect()
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::invalid(format!("unknown measure '{s}'")))
    }
}

/// Shares of meta-analyses by Bayes factor threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfProportions {
    pub above_3: f64,
    pub above_10: f64,
    pub below_1_3: f64,
    pub below_1_10: f64,
}

impl BfProportions {
    fn of(log_bfs: &[f64]) -> BfProportions {
        let n = log_bfs.len() as f64;
        let share = |f: &dyn Fn(f64) -> bool| log_bfs.iter().filter(|&&l| f(l)).count() as f64 / n;
        let (l3, l10) = (3f64.ln(), 10f64.ln());
        BfProportions {
            above_3: share(&|l| l > l3),
            above_10: share(&|l| l > l10),
            below_1_3: share(&|l| l < -l3),
            below_1_10: share(&|l| l < -l10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub field: String,
    pub n_mas: usize,
    pub measures: BTreeMap<Measure, Stat>,
    /// Share of significant REML estimates among converged fits.
    pub prop_significant: Option<f64>,
    pub reml_not_converged: usize,
    pub bf_effect_adj: BfProportions,
    pub bf_effect_unadj: BfProportions,
    pub bf_psb: BfProportions,
    /// Ratio of mean unweighted to mean adjusted effect.
    pub of_aggregate: Option<RatioEstimate>,
    pub of_k_undefined: usize,
}

pub fn field_summary(rows: &[MeasureSet], field: &str) -> Result<FieldSummary> {
    let sel: Vec<&MeasureSet> = rows.iter().filter(|r| r.field == field).collect();
    if sel.is_empty() {
        return Err(Error::invalid(format!("no meta-analyses for field '{field}'")));
    }
    let measures = Measure::ALL.into_iter().filter_map(|m| Stat::of(&m.values(&sel)).map(|s| (m, s))).collect();
    let converged: Vec<&&MeasureSet> = sel.iter().filter(|r| r.reml_converged).collect();
    let prop_significant = (!converged.is_empty()).then(|| converged.iter().filter(|r| r.reml_significant).count() as f64 / converged.len() as f64);
    let pick = |f: fn(&MeasureSet) -> f64| -> Vec<f64> { sel.iter().map(|r| f(r)).collect() };
    let y_bars = pick(|r| r.y_bar);
    let mu_adjs = pick(|r| r.mu_adj);
    Ok(FieldSummary {
        field: field.to_string(),
        n_mas: sel.len(),
        measures,
        prop_significant,
        reml_not_converged: sel.len() - converged.len(),
        bf_effect_adj: BfProportions::of(&pick(|r| r.log_bf_effect_adj)),
        bf_effect_unadj: BfProportions::of(&pick(|r| r.log_bf_effect_unadj)),
        bf_psb: BfProportions::of(&pick(|r| r.log_bf_psb)),
        of_aggregate: overestimation_factor(&y_bars, &mu_adjs).ok(),
        of_k_undefined: sel.iter().filter(|r| r.of_k.is_none()).count(),
    })
}

/// Field labels in sorted order.
pub fn fields(rows: &[MeasureSet]) -> Vec<String> {
    let mut f: Vec<String> = rows.iter().map(|r| r.field.clone()).collect();
    f.sort();
    f.dedup();
    f
}

/// Summaries for every field, in sorted field order.
pub fn summarize_fields(rows: &[MeasureSet]) -> Result<Vec<FieldSummary>> {
    fields(rows).iter().map(|f| field_summary(rows, f)).collect()
}

/// Bins on the number of estimates per meta-analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KBin {
    pub lo: usize,
    /// Exclusive; `None` for the open top bin.
    pub hi: Option<usize>,
}

pub const KBINS: [KBin; 8] = [
    KBin { lo: 0, hi: Some(5) },
    KBin { lo: 5, hi: Some(10) },
    KBin { lo: 10, hi: Some(20) },
    KBin { lo: 20, hi: Some(30) },
    KBin { lo: 30, hi: Some(50) },
    KBin { lo: 50, hi: Some(100) },
    KBin { lo: 100, hi: Some(300) },
    KBin { lo: 300, hi: None },
];

impl KBin {
    pub fn label(self) -> String {
        match self.hi {
            _ if self.lo == 0 => format!("<{}", self.hi.unwrap_or(0)),
            Some(hi) => format!("{}-{}", self.lo, hi - 1),
            None => format!(">={}", self.lo),
        }
    }

    pub fn contains(self, n: usize) -> bool {
        n >= self.lo && self.hi.is_none_or(|hi| n < hi)
    }

    pub fn of(n: usize) -> KBin {
        *KBINS.iter().find(|b| b.contains(n)).expect("bins cover every count")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KBinRow {
    pub field: String,
    pub bin: String,
    /// Meta-analyses in the bin.
    pub k: usize,
    /// Blank for empty bins.
    pub stat: Option<Stat>,
}

/// One row per bin per field (empty bins included, with no statistics).
pub fn kbin_table(rows: &[MeasureSet], measure: Measure) -> Result<Vec<KBinRow>> {
    if rows.is_empty() {
        return Err(Error::invalid("no rows to bin"));
    }
    let mut out = Vec::new();
    for field in fields(rows) {
        for bin in KBINS {
            let sel: Vec<&MeasureSet> = rows.iter().filter(|r| r.field == field && bin.contains(r.n_estimates)).collect();
            out.push(KBinRow { field: field.clone(), bin: bin.label(), k: sel.len(), stat: Stat::of(&measure.values(&sel)) });
        }
    }
    Ok(out)
}

pub fn write_kbin_csv<W: std::io::Write>(table: &[KBinRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["field", "bin", "k", "count", "median", "q25", "q75", "mean", "ci_low", "ci_high"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in table {
        let s = row.stat.as_ref();
        w.write_record([
            row.field.clone(),
            row.bin.clone(),
            row.k.to_string(),
            s.map(|s| s.count.to_string()).unwrap_or_default(),
            opt(s.map(|s| s.median)),
            opt(s.map(|s| s.q25)),
            opt(s.map(|s| s.q75)),
            opt(s.map(|s| s.mean)),
            opt(s.and_then(|s| s.ci_low)),
            opt(s.and_then(|s| s.ci_high)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Flat CSV with one row per field and measure.
pub fn write_field_csv<W: std::io::Write>(summaries: &[FieldSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["field", "n_mas", "measure", "count", "median", "q25", "q75", "mean", "ci_low", "ci_high"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in summaries {
        for (m, st) in &s.measures {
            w.write_record([
                s.field.clone(),
                s.n_mas.to_string(),
                m.to_string(),
                st.count.to_string(),
                st.median.to_string(),
                st.q25.to_string(),
                st.q75.to_string(),
                st.mean.to_string(),
                opt(st.ci_low),
                opt(st.ci_high),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySummary {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// Silverman's rule of thumb, falling back to the standard deviation, then
/// `|x_0|`, then 1 when the spread is zero.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let (_, sd) = mean_sd(sorted);
    let sd = sd.unwrap_or(0.0);
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let mut lo = sd.min(iqr / 1.34);
    if !(lo > 0.0) {
        lo = if sd > 0.0 {
            sd
        } else if sorted[0] != 0.0 {
            sorted[0].abs()
        } else {
            1.0
        };
    }
    0.9 * lo * (sorted.len() as f64).powf(-0.2)
}

/// Gaussian KDE on a uniform grid covering the data plus three bandwidths
/// each side.
pub fn density_summary(values: &[f64], grid_size: usize) -> Result<DensitySummary> {
    if values.len() < 2 {
        return Err(Error::invalid("need at least two values"));
    }
    if grid_size < 2 {
        return Err(Error::invalid("grid needs at least two points"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("values must be finite"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = silverman_bandwidth(&v);
    let (lo, hi) = (v[0] - 3.0 * h, v[v.len() - 1] + 3.0 * h);
    let step = (hi - lo) / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|i| if i + 1 == grid_size { hi } else { lo + step * i as f64 }).collect();
    let norm = 1.0 / (v.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&x| {
            // pair terms from both ends so mirrored data give mirrored sums
            let n = v.len();
            let mut s = 0.0;
            for i in 0..n / 2 {
                let (a, b) = ((x - v[i]) / h, (x - v[n - 1 - i]) / h);
                s += (-0.5 * a * a).exp() + (-0.5 * b * b).exp();
            }
            if n % 2 == 1 {
                let c = (x - v[n / 2]) / h;
                s += (-0.5 * c * c).exp();
            }
            norm * s
        })
        .collect();
    Ok(DensitySummary {
        median: quantile_sorted(&v, 0.5),
        q25: quantile_sorted(&v, 0.25),
        q75: quantile_sorted(&v, 0.75),
        bandwidth: h,
        grid,
        density,
    })
}

/// Violin data per field for one measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violin {
    pub field: String,
    pub measure: Measure,
    pub summary: DensitySummary,
}

pub fn violins(rows: &[MeasureSet], measure: Measure, grid_size: usize) -> Vec<Violin> {
    fields(rows)
        .into_iter()
        .filter_map(|field| {
            let sel: Vec<&MeasureSet> = rows.iter().filter(|r| r.field == field).collect();
            let summary = density_summary(&measure.values(&sel), grid_size).ok()?;
            Some(Violin { field, measure, summary })
        })
        .collect()
}
