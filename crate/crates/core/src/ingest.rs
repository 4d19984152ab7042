//! Loading estimate-level data from CSV and applying inclusion filters.
//!
//! Header names (one schema per file; an optional `field` column labels the
//! research field of each meta-analysis, other extra columns are ignored):
//!
//! * `PRECOMPUTED`: `ma_id,study_id,metric,value,se`
//! * `RAW_CONTINUOUS`: `ma_id,study_id,mean_t,sd_t,n_t,mean_c,sd_c,n_c`
//! * `RAW_DICHOTOMOUS`: `ma_id,study_id,events_t,n_t,events_c,n_c`

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::effectsize::{logor_values, smd_values, ContinuousArms, Estimate, Metric, TwoByTwo};
use crate::error::{Error, Result};

pub const DEFAULT_FIELD: &str = "unspecified";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Schema {
    Precomputed,
    RawContinuous,
    RawDichotomous,
}

impl Schema {
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Schema::Precomputed => &["ma_id", "study_id", "metric", "value", "se"],
            Schema::RawContinuous => &["ma_id", "study_id", "mean_t", "sd_t", "n_t", "mean_c", "sd_c", "n_c"],
            Schema::RawDichotomous => &["ma_id", "study_id", "events_t", "n_t", "events_c", "n_c"],
        }
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "PRECOMPUTED" => Ok(Schema::Precomputed),
            "RAW_CONTINUOUS" => Ok(Schema::RawContinuous),
            "RAW_DICHOTOMOUS" => Ok(Schema::RawDichotomous),
            _ => Err(Error::invalid(format!("unknown schema '{s}'"))),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Precomputed => "PRECOMPUTED",
            Schema::RawContinuous => "RAW_CONTINUOUS",
            Schema::RawDichotomous => "RAW_DICHOTOMOUS",
        })
    }
}

/// Where an estimate came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// 1-based line in the source file; 0 for generated data.
    pub line: u64,
    pub metric: Metric,
    pub y: f64,
    pub se: f64,
    /// Smallest arm size when computed from raw data.
    pub min_arm_n: Option<u64>,
}

/// One meta-analysis. `estimates` are in Fisher's z and run parallel to
/// `provenance`; rows that could not be computed hold NaN until filtered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaAnalysis {
    pub ma_id: String,
    pub field: String,
    pub estimates: Vec<Estimate>,
    pub provenance: Vec<Provenance>,
}

impl MetaAnalysis {
    pub fn new(ma_id: impl Into<String>, field: impl Into<String>) -> Self {
        MetaAnalysis { ma_id: ma_id.into(), field: field.into(), estimates: Vec::new(), provenance: Vec::new() }
    }

    /// Adds an estimate in any metric, normalizing it to Fisher's z.
    pub fn push(&mut self, study_id: impl Into<String>, y: f64, se: f64, metric: Metric, line: u64, min_arm_n: Option<u64>) {
        let study_id = study_id.into();
        let z = Estimate { y, se, metric, study_id: study_id.clone() }
            .to_metric(Metric::FisherZ)
            .unwrap_or(Estimate { y: f64::NAN, se: f64::NAN, metric: Metric::FisherZ, study_id });
        self.estimates.push(z);
        self.provenance.push(Provenance { line, metric, y, se, min_arm_n });
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NonPositiveSe,
    InvalidValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: u64,
    pub ma_id: String,
    pub study_id: String,
    pub reason: RejectReason,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta_analyses: Vec<MetaAnalysis>,
    /// Rows refused at load time, pending report by the filter.
    pub rejections: Vec<Rejection>,
}

impl Dataset {
    pub fn n_estimates(&self) -> usize {
        self.meta_analyses.iter().map(|m| m.len()).sum()
    }

    pub fn get(&self, ma_id: &str) -> Option<&MetaAnalysis> {
        self.meta_analyses.iter().find(|m| m.ma_id == ma_id)
    }
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.index.get(name).and_then(|&i| rec.get(i)).map(str::trim)
    }
}

fn parse_f64(s: &str, col: &str, line: u64) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse { line, message: format!("column '{col}': cannot parse '{s}' as a number") })
}

fn parse_u64(s: &str, col: &str, line: u64) -> Result<u64> {
    s.parse::<u64>().map_err(|_| Error::Parse { line, message: format!("column '{col}': cannot parse '{s}' as a count") })
}

/// Loads a CSV file in the given schema.
pub fn load_dataset(path: impl AsRef<Path>, schema: Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: Read>(input: R, schema: Schema) -> Result<Dataset> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rd.headers()?.clone();
    let index: HashMap<String, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
    let missing: Vec<&str> = schema.columns().iter().copied().filter(|c| !index.contains_key(*c)).collect();
    if !missing.is_empty() {
        return Err(Error::Parse { line: 1, message: format!("{schema} header is missing columns: {}", missing.join(", ")) });
    }
    let cols = Columns { index };

    let mut ds = Dataset::default();
    let mut position: HashMap<String, usize> = HashMap::new();
    let mut rows = 0usize;
    for rec in rd.records() {
        let rec = rec?;
        rows += 1;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let text = |name: &str| -> Result<&str> {
            match cols.get(&rec, name) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(Error::Parse { line, message: format!("column '{name}' is empty") }),
            }
        };
        let num = |name: &str| -> Result<f64> { parse_f64(text(name)?, name, line) };
        let count = |name: &str| -> Result<u64> { parse_u64(text(name)?, name, line) };

        let ma_id = text("ma_id")?.to_string();
        let study_id = text("study_id")?.to_string();
        let field = cols.get(&rec, "field").filter(|f| !f.is_empty()).unwrap_or(DEFAULT_FIELD).to_string();

        // (metric, y, se, smallest arm) or a load-time rejection
        let parsed: std::result::Result<(Metric, f64, f64, Option<u64>), (RejectReason, String)> = match schema {
            Schema::Precomputed => {
                let metric: Metric = text("metric")?.parse().map_err(|_| Error::Parse { line, message: format!("unknown metric tag '{}'", text("metric").unwrap_or("")) })?;
                let (y, se) = (num("value")?, num("se")?);
                if se <= 0.0 {
                    Err((RejectReason::NonPositiveSe, format!("se = {se}")))
                } else if metric == Metric::CorrelationR && y.abs() >= 1.0 {
                    Err((RejectReason::InvalidValue, format!("correlation {y} outside (-1, 1)")))
                } else {
                    Ok((metric, y, se, None))
                }
            }
            Schema::RawContinuous => {
                let arms = ContinuousArms {
                    mean_t: num("mean_t")?,
                    sd_t: num("sd_t")?,
                    n_t: count("n_t")?,
                    mean_c: num("mean_c")?,
                    sd_c: num("sd_c")?,
                    n_c: count("n_c")?,
                };
                let min_n = arms.n_t.min(arms.n_c);
                if min_n <= 1 {
                    Ok((Metric::CohenD, f64::NAN, f64::NAN, Some(min_n)))
                } else {
                    smd_values(&arms).map(|(y, se)| (Metric::CohenD, y, se, Some(min_n))).map_err(|e| (RejectReason::InvalidValue, e.to_string()))
                }
            }
            Schema::RawDichotomous => {
                let t = TwoByTwo { events_t: count("events_t")?, n_t: count("n_t")?, events_c: count("events_c")?, n_c: count("n_c")? };
                let min_n = t.n_t.min(t.n_c);
                if t.events_t > t.n_t || t.events_c > t.n_c {
                    Err((RejectReason::InvalidValue, "more events than participants".to_string()))
                } else if min_n <= 1 {
                    Ok((Metric::LogOr, f64::NAN, f64::NAN, Some(min_n)))
                } else {
                    logor_values(&t).map(|(y, se)| (Metric::LogOr, y, se, Some(min_n))).map_err(|e| (RejectReason::InvalidValue, e.to_string()))
                }
            }
        };
        match parsed {
            Ok((metric, y, se, min_n)) => {
                let i = *position.entry(ma_id.clone()).or_insert_with(|| {
                    ds.meta_analyses.push(MetaAnalysis::new(ma_id.clone(), field.clone()));
                    ds.meta_analyses.len() - 1
                });
                let ma = &mut ds.meta_analyses[i];
                if ma.field != field {
                    return Err(Error::Parse { line, message: format!("meta-analysis '{ma_id}' has conflicting fields '{}' and '{field}'", ma.field) });
                }
                ma.push(study_id, y, se, metric, line, min_n);
            }
            Err((reason, message)) => ds.rejections.push(Rejection { line, ma_id, study_id, reason, message }),
        }
    }
    if rows == 0 {
        return Err(Error::Parse { line: 1, message: "no data rows".to_string() });
    }
    Ok(ds)
}

/// Counts of every removal by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_rows: usize,
    pub rejected_non_positive_se: usize,
    pub rejected_invalid_value: usize,
    pub small_arm: usize,
    pub non_finite: usize,
    pub ma_too_small: usize,
    pub estimates_in_small_mas: usize,
    pub surviving_estimates: usize,
    pub surviving_mas: usize,
    pub rejected_lines: Vec<u64>,
}

impl FilterReport {
    pub fn removed(&self) -> usize {
        self.rejected_non_positive_se + self.rejected_invalid_value + self.small_arm + self.non_finite + self.estimates_in_small_mas
    }

    /// Nothing was removed.
    pub fn is_clean(&self) -> bool {
        self.removed() == 0 && self.ma_too_small == 0
    }
}

/// Drops estimates from arms with one or fewer participants and non-finite
/// estimates, then meta-analyses with fewer than three estimates left.
pub fn validate_and_filter(ds: Dataset) -> (Dataset, FilterReport) {
    let mut report = FilterReport { input_rows: ds.rejections.len() + ds.n_estimates(), ..FilterReport::default() };
    for r in &ds.rejections {
        match r.reason {
            RejectReason::NonPositiveSe => report.rejected_non_positive_se += 1,
            RejectReason::InvalidValue => report.rejected_invalid_value += 1,
        }
        report.rejected_lines.push(r.line);
    }
    let mut out = Vec::with_capacity(ds.meta_analyses.len());
    for ma in ds.meta_analyses {
        let mut kept = MetaAnalysis::new(ma.ma_id, ma.field);
        for (est, prov) in ma.estimates.into_iter().zip(ma.provenance) {
            if prov.min_arm_n.is_some_and(|n| n <= 1) {
                report.small_arm += 1;
            } else if !(est.is_valid() && prov.y.is_finite() && prov.se.is_finite()) {
                report.non_finite += 1;
            } else {
                kept.estimates.push(est);
                kept.provenance.push(prov);
            }
        }
        if kept.len() < 3 {
            report.ma_too_small += 1;
            report.estimates_in_small_mas += kept.len();
        } else {
            report.surviving_estimates += kept.len();
            out.push(kept);
        }
    }
    report.surviving_mas = out.len();
    (Dataset { meta_analyses: out, rejections: Vec::new() }, report)
}

/// Writes a dataset in the `PRECOMPUTED` schema using each estimate's
/// original metric.
pub fn write_precomputed_csv<W: std::io::Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ma_id", "study_id", "metric", "value", "se", "field"])?;
    for ma in &ds.meta_analyses {
        for (est, prov) in ma.estimates.iter().zip(&ma.provenance) {
            w.write_record([ma.ma_id.as_str(), est.study_id.as_str(), prov.metric.tag(), &prov.y.to_string(), &prov.se.to_string(), ma.field.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}
