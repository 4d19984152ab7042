//! Effect-size metrics, conversions between them and computation of
//! standardized effects from raw arm-level data.
//!
//! Conversions go through Cohen's d:
//!
//! * `d = 2r / sqrt(1 - r²)` and `r = d / sqrt(d² + 4)` (equal group sizes),
//! * `d = ln(OR) · sqrt(3) / π`,
//! * `z = atanh(r)`, which composes to `d = 2 sinh(z)`.
//!
//! Standard errors are propagated with the first-order delta method.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::norm_sf;
use crate::error::{Error, Result};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    CohenD,
    CorrelationR,
    LogOr,
    FisherZ,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::CohenD,
        Metric::CorrelationR,
        Metric::LogOr,
        Metric::FisherZ,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Metric::CohenD => "COHEN_D",
            Metric::CorrelationR => "CORRELATION_R",
            Metric::LogOr => "LOG_OR",
            Metric::FisherZ => "FISHER_Z",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "COHEN_D" | "D" | "SMD" => Ok(Metric::CohenD),
            "CORRELATION_R" | "R" => Ok(Metric::CorrelationR),
            "LOG_OR" | "LOGOR" => Ok(Metric::LogOr),
            "FISHER_Z" | "Z" => Ok(Metric::FisherZ),
            other => Err(Error::invalid(format!("unknown metric tag '{other}'"))),
        }
    }
}

/// One primary-study effect size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub y: f64,
    pub se: f64,
    pub metric: Metric,
    pub study_id: String,
}

impl Estimate {
    /// Builds an estimate, checking `se > 0`, a finite value and `|r| < 1`.
    pub fn new(y: f64, se: f64, metric: Metric, study_id: impl Into<String>) -> Result<Self> {
        let est = Estimate {
            y,
            se,
            metric,
            study_id: study_id.into(),
        };
        est.check()?;
        Ok(est)
    }

    pub fn check(&self) -> Result<()> {
        if !self.y.is_finite() {
            return Err(Error::invalid(format!("non-finite effect size {}", self.y)));
        }
        if !(self.se.is_finite() && self.se > 0.0) {
            return Err(Error::invalid(format!("standard error must be positive, got {}", self.se)));
        }
        if self.metric == Metric::CorrelationR && self.y.abs() >= 1.0 {
            return Err(Error::invalid(format!("correlation {} outside (-1, 1)", self.y)));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check().is_ok()
    }

    /// Re-expresses the estimate in another metric.
    pub fn to_metric(&self, to: Metric) -> Result<Estimate> {
        let (y, se) = convert_with_se(self.y, self.se, self.metric, to)?;
        Ok(Estimate {
            y,
            se,
            metric: to,
            study_id: self.study_id.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoByTwo {
    pub events_t: u64,
    pub n_t: u64,
    pub events_c: u64,
    pub n_c: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousArms {
    pub mean_t: f64,
    pub sd_t: f64,
    pub n_t: u64,
    pub mean_c: f64,
    pub sd_c: f64,
    pub n_c: u64,
}

fn check_point(y: f64, metric: Metric) -> Result<()> {
    if !y.is_finite() {
        return Err(Error::invalid(format!("non-finite value {y}")));
    }
    if metric == Metric::CorrelationR && y.abs() >= 1.0 {
        return Err(Error::invalid(format!("correlation {y} outside (-1, 1)")));
    }
    Ok(())
}

/// Value and derivative `dd/dy` of the map into Cohen's d.
fn to_d(y: f64, from: Metric) -> (f64, f64) {
    match from {
        Metric::CohenD => (y, 1.0),
        Metric::CorrelationR => {
            let q = 1.0 - y * y;
            (2.0 * y / q.sqrt(), 2.0 / (q * q.sqrt()))
        }
        Metric::LogOr => (y * SQRT_3 / PI, SQRT_3 / PI),
        Metric::FisherZ => (2.0 * y.sinh(), 2.0 * y.cosh()),
    }
}

/// Value and derivative of the map out of Cohen's d.
fn from_d(d: f64, to: Metric) -> (f64, f64) {
    match to {
        Metric::CohenD => (d, 1.0),
        Metric::CorrelationR => {
            let s = d * d + 4.0;
            (d / s.sqrt(), 4.0 / (s * s.sqrt()))
        }
        Metric::LogOr => (d * PI / SQRT_3, PI / SQRT_3),
        Metric::FisherZ => ((0.5 * d).asinh(), 1.0 / (d * d + 4.0).sqrt()),
    }
}

/// Converts a point value between metrics.
pub fn convert_point(y: f64, from: Metric, to: Metric) -> Result<f64> {
    check_point(y, from)?;
    if from == to {
        return Ok(y);
    }
    // r <-> z directly keeps full precision for strong correlations
    let out = match (from, to) {
        (Metric::CorrelationR, Metric::FisherZ) => y.atanh(),
        (Metric::FisherZ, Metric::CorrelationR) => y.tanh(),
        _ => from_d(to_d(y, from).0, to).0,
    };
    if !out.is_finite() {
        return Err(Error::invalid(format!("conversion of {y} from {from} to {to} overflowed")));
    }
    Ok(out)
}

/// Converts a value and its standard error (delta method).
pub fn convert_with_se(y: f64, se: f64, from: Metric, to: Metric) -> Result<(f64, f64)> {
    if !(se.is_finite() && se > 0.0) {
        return Err(Error::invalid(format!("standard error must be positive, got {se}")));
    }
    let value = convert_point(y, from, to)?;
    if from == to {
        return Ok((value, se));
    }
    let slope = match (from, to) {
        (Metric::CorrelationR, Metric::FisherZ) => 1.0 / (1.0 - y * y),
        (Metric::FisherZ, Metric::CorrelationR) => 1.0 - y.tanh().powi(2),
        _ => {
            let (d, dd) = to_d(y, from);
            dd * from_d(d, to).1
        }
    };
    let out_se = slope.abs() * se;
    if !(out_se.is_finite() && out_se > 0.0) {
        return Err(Error::numerical(format!("standard error degenerated converting {from} to {to}")));
    }
    Ok((value, out_se))
}

/// Hedges-corrected standardized mean difference (treatment minus control).
pub fn smd_from_continuous(arms: &ContinuousArms, study_id: impl Into<String>) -> Result<Estimate> {
    if arms.n_t <= 1 || arms.n_c <= 1 {
        return Err(Error::invalid("each arm needs more than one participant"));
    }
    let (y, se) = smd_values(arms)?;
    Estimate::new(y, se, Metric::CohenD, study_id)
}

/// Unchecked core of [`smd_from_continuous`]; the arm-size invariant is left
/// to the caller so that ingestion can keep and later filter small arms.
pub(crate) fn smd_values(a: &ContinuousArms) -> Result<(f64, f64)> {
    if !(a.sd_t > 0.0 && a.sd_c > 0.0) {
        return Err(Error::invalid("standard deviations must be positive"));
    }
    if a.n_t + a.n_c < 3 {
        return Err(Error::invalid("need at least one residual degree of freedom"));
    }
    let (nt, nc) = (a.n_t as f64, a.n_c as f64);
    let df = nt + nc - 2.0;
    let pooled = (((nt - 1.0) * a.sd_t * a.sd_t + (nc - 1.0) * a.sd_c * a.sd_c) / df).sqrt();
    if !(pooled > 0.0) {
        return Err(Error::invalid("zero pooled standard deviation"));
    }
    let j = 1.0 - 3.0 / (4.0 * df - 1.0);
    let g = j * (a.mean_t - a.mean_c) / pooled;
    let var = 1.0 / nt + 1.0 / nc + g * g / (2.0 * (nt + nc));
    Ok((g, var.sqrt()))
}

/// Log odds ratio with the 1/2 continuity correction applied to every cell
/// when any cell is empty.
pub fn logor_from_counts(t: &TwoByTwo, study_id: impl Into<String>) -> Result<Estimate> {
    if t.n_t <= 1 || t.n_c <= 1 {
        return Err(Error::invalid("each arm needs more than one participant"));
    }
    let (y, se) = logor_values(t)?;
    Estimate::new(y, se, Metric::LogOr, study_id)
}

pub(crate) fn logor_values(t: &TwoByTwo) -> Result<(f64, f64)> {
    if t.events_t > t.n_t || t.events_c > t.n_c {
        return Err(Error::invalid("events exceed arm size"));
    }
    if t.n_t == 0 || t.n_c == 0 {
        return Err(Error::invalid("empty arm"));
    }
    let mut cells = [
        t.events_t as f64,
        (t.n_t - t.events_t) as f64,
        t.events_c as f64,
        (t.n_c - t.events_c) as f64,
    ];
    if cells.iter().any(|&c| c == 0.0) {
        for c in &mut cells {
            *c += 0.5;
        }
    }
    let [a, b, c, d] = cells;
    let y = (a * d / (b * c)).ln();
    let se = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
    Ok((y, se))
}

/// One-sided p-value `1 - Φ(y / se)`.
pub fn one_sided_p(y: f64, se: f64) -> Result<f64> {
    if !(se > 0.0) {
        return Err(Error::invalid(format!("standard error must be positive, got {se}")));
    }
    Ok(norm_sf(y / se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn spot_conversions() {
        assert_eq!(convert_point(0.0, Metric::CorrelationR, Metric::CohenD).unwrap(), 0.0);
        let d = convert_point(0.5, Metric::CorrelationR, Metric::CohenD).unwrap();
        assert!(close(d, 2.0 * 0.5 / (1.0f64 - 0.25).sqrt(), 1e-15));
        assert!(close(d, 1.154_701, 1e-6));
        let d = convert_point(1.0, Metric::LogOr, Metric::CohenD).unwrap();
        assert!(close(d, 0.551_329, 1e-6));
        let z = convert_point(0.5, Metric::CorrelationR, Metric::FisherZ).unwrap();
        assert!(close(z, 0.549_306, 1e-6));
    }

    #[test]
    fn conversion_errors() {
        assert!(convert_point(1.0, Metric::CorrelationR, Metric::CohenD).is_err());
        assert!(convert_point(f64::NAN, Metric::CohenD, Metric::FisherZ).is_err());
        assert!(convert_with_se(0.1, 0.0, Metric::CohenD, Metric::FisherZ).is_err());
    }

    #[test]
    fn se_conversion_examples() {
        assert_eq!(
            convert_with_se(0.3, 0.1, Metric::CohenD, Metric::CohenD).unwrap(),
            (0.3, 0.1)
        );
        // d -> r with a = 4, then r -> z
        let r = 0.5 / (0.25f64 + 4.0).sqrt();
        let (z, se) = convert_with_se(0.5, 0.2, Metric::CohenD, Metric::FisherZ).unwrap();
        assert!(close(z, r.atanh(), 1e-15));
        assert!(close(z, 0.2475, 1e-4));
        let h = 1e-6;
        let jac = (convert_point(0.5 + h, Metric::CohenD, Metric::FisherZ).unwrap()
            - convert_point(0.5 - h, Metric::CohenD, Metric::FisherZ).unwrap())
            / (2.0 * h);
        assert!(close(se, jac * 0.2, 1e-9));

        let (d, se) = convert_with_se(1.0, 0.5, Metric::LogOr, Metric::CohenD).unwrap();
        assert!(close(d, 0.5513, 1e-4));
        assert!(close(se, 0.2757, 1e-4));
    }

    #[test]
    fn smd_examples() {
        let arms = ContinuousArms { mean_t: 1.0, sd_t: 1.0, n_t: 10, mean_c: 0.0, sd_c: 1.0, n_c: 10 };
        let e = smd_from_continuous(&arms, "s").unwrap();
        assert!(close(e.y, 1.0 - 3.0 / 71.0, 1e-15));
        assert!(close(e.y, 0.957_746, 1e-6));

        let flat = ContinuousArms { mean_t: 5.0, sd_t: 2.0, n_t: 20, mean_c: 5.0, sd_c: 2.0, n_c: 20 };
        assert_eq!(smd_from_continuous(&flat, "s").unwrap().y, 0.0);

        let swapped = ContinuousArms { mean_t: 0.0, sd_t: 1.0, n_t: 10, mean_c: 1.0, sd_c: 1.0, n_c: 10 };
        let s = smd_from_continuous(&swapped, "s").unwrap();
        assert_eq!(s.y, -e.y);
        assert_eq!(s.se, e.se);
    }

    #[test]
    fn logor_examples() {
        let t = TwoByTwo { events_t: 10, n_t: 20, events_c: 10, n_c: 20 };
        let e = logor_from_counts(&t, "s").unwrap();
        assert_eq!(e.y, 0.0);
        assert!(close(e.se, 0.4f64.sqrt(), 1e-15));

        let t = TwoByTwo { events_t: 0, n_t: 10, events_c: 5, n_c: 10 };
        let e = logor_from_counts(&t, "s").unwrap();
        assert!(close(e.y, ((0.5 * 5.5) / (10.5 * 5.5f64)).ln(), 1e-14));
        assert!(close(e.y, -3.0445, 1e-4));
        let se = (1.0 / 0.5 + 1.0 / 10.5 + 1.0 / 5.5 + 1.0 / 5.5f64).sqrt();
        assert!(close(e.se, se, 1e-14));

        let swapped = TwoByTwo { events_t: 5, n_t: 10, events_c: 0, n_c: 10 };
        assert!(close(logor_from_counts(&swapped, "s").unwrap().y, -e.y, 1e-14));

        let single = TwoByTwo { events_t: 0, n_t: 1, events_c: 5, n_c: 10 };
        assert!(logor_from_counts(&single, "s").is_err());
    }

    #[test]
    fn logor_without_zero_cells_matches_direct_formula() {
        let t = TwoByTwo { events_t: 3, n_t: 17, events_c: 8, n_c: 12 };
        let e = logor_from_counts(&t, "s").unwrap();
        assert!(close(e.y, (3.0 * 4.0 / (14.0 * 8.0f64)).ln(), 1e-14));
    }

    #[test]
    fn one_sided_p_examples() {
        assert_eq!(one_sided_p(0.0, 1.0).unwrap(), 0.5);
        assert!(close(one_sided_p(1.96, 1.0).unwrap(), 0.0250, 1e-4));
        assert!(close(one_sided_p(-1.6449, 1.0).unwrap(), 0.95, 1e-4));
        assert!(one_sided_p(1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn round_trips(from_idx in 0usize..4, to_idx in 0usize..4, u in 0.0f64..1.0) {
            let from = Metric::ALL[from_idx];
            let to = Metric::ALL[to_idx];
            let y = match from { Metric::CorrelationR => -0.99 + 1.98 * u, _ => -3.0 + 6.0 * u };
            let there = convert_point(y, from, to).unwrap();
            let back = convert_point(there, to, from).unwrap();
            prop_assert!((back - y).abs() <= 1e-12, "{} -> {} -> {}", y, there, back);
        }

        #[test]
        fn se_matches_numeric_jacobian(from_idx in 0usize..4, to_idx in 0usize..4, u in 0.0f64..1.0, se in 0.01f64..1.0) {
            let from = Metric::ALL[from_idx];
            let to = Metric::ALL[to_idx];
            let y = match from { Metric::CorrelationR => -0.9 + 1.8 * u, _ => -2.0 + 4.0 * u };
            let (v, s) = convert_with_se(y, se, from, to).unwrap();
            prop_assert_eq!(v, convert_point(y, from, to).unwrap());
            let h = 1e-5;
            let jac = (convert_point(y + h, from, to).unwrap() - convert_point(y - h, from, to).unwrap()) / (2.0 * h);
            prop_assert!((s - jac.abs() * se).abs() <= 1e-8 * (1.0 + s));
        }

        #[test]
        fn one_sided_p_is_symmetric(y in -8.0f64..8.0) {
            let p = one_sided_p(y, 1.0).unwrap();
            let q = one_sided_p(-y, 1.0).unwrap();
            prop_assert!((p + q - 1.0).abs() <= 1e-14);
            // strict decrease is only resolvable in f64 away from p = 1
            if y > -5.0 {
                prop_assert!(one_sided_p(y + 1e-3, 1.0).unwrap() < p);
            }
        }
    }
}
