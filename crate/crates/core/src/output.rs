//! Result files.
//!
//! JSON documents carry `"version": 1`, have their keys sorted and every
//! float rounded to 12 significant digits, so identical runs produce
//! identical bytes. Tables are tidy CSV with one observation per row.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::grid::GridCase;
use crate::market::DispatchResult;
use crate::mccormick::{ConvexStatus, ConvexifiedResult, TraceRow};
use crate::pricing::{PriceReport, PriceSet, ResMarginal, Settlement};
use crate::security::{ScMode, ScopfResult};
use crate::uncertainty::{BalancingPolicy, Column, Direction};
use crate::validation::{FdReport, KktReport, ViolationReport};

pub const SCHEMA_VERSION: u32 = 1;
pub const SIGNIFICANT_DIGITS: usize = 12;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: schema version {found:?}, expected {SCHEMA_VERSION}")]
    Version { path: String, found: Option<u64> },
}

/// Rounds to `SIGNIFICANT_DIGITS` significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_value),
        Value::Object(m) => m.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Canonical JSON text of a document.
pub fn to_canonical_json<T: Serialize>(doc: &T) -> Result<String, serde_json::Error> {
    let mut v = serde_json::to_value(doc)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<(), OutputError> {
    let p = path.display().to_string();
    let text = to_canonical_json(doc).map_err(|source| OutputError::Json { path: p.clone(), source })?;
    fs::write(path, text).map_err(|source| OutputError::Io { path: p, source })
}

/// Reads a versioned document, rejecting other schema versions.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, OutputError> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| OutputError::Io { path: p.clone(), source })?;
    let v: Value = serde_json::from_str(&text).map_err(|source| OutputError::Json { path: p.clone(), source })?;
    let found = v.get("version").and_then(Value::as_u64);
    if found != Some(SCHEMA_VERSION as u64) {
        return Err(OutputError::Version { path: p, found });
    }
    serde_json::from_value(v).map_err(|source| OutputError::Json { path: p, source })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), OutputError> {
    let p = path.display().to_string();
    let err = |source| OutputError::Csv { path: p.clone(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|source| OutputError::Io { path: p.clone(), source })
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, OutputError> {
    let p = path.display().to_string();
    let err = |source| OutputError::Csv { path: p.clone(), source };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(err)
}

/// Summary of a sequential convexification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexSummary {
    pub status: ConvexStatus,
    pub gap_tol_percent: f64,
    pub gap_percent: f64,
    pub lower: f64,
    pub upper: f64,
    pub global_lower: f64,
    pub trace: Vec<TraceRow>,
}

impl ConvexSummary {
    pub fn new(r: &ConvexifiedResult, gap_tol: f64) -> Self {
        ConvexSummary {
            status: r.status,
            gap_tol_percent: gap_tol,
            gap_percent: r.gap_percent,
            lower: r.lower,
            upper: r.upper,
            global_lower: r.global_lower,
            trace: r.trace.clone(),
        }
    }
}

/// `result.json` of `solve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDoc {
    pub version: u32,
    pub case: String,
    pub policy: BalancingPolicy,
    pub epsilon: f64,
    pub objective: f64,
    pub dispatch: DispatchResult,
    /// Prices read from the solver's multipliers.
    pub prices: PriceSet,
    pub closed_form: PriceSet,
    pub price_check: PriceReport,
    pub settlement: Settlement,
    pub res_marginal: Option<Vec<ResMarginal>>,
    pub convexification: Option<ConvexSummary>,
}

/// `prices.json` of `prices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricesDoc {
    pub version: u32,
    pub case: String,
    pub policy: BalancingPolicy,
    pub epsilon: f64,
    pub prices: PriceSet,
    pub closed_form: PriceSet,
    pub price_check: PriceReport,
    pub finite_differences: FdReport,
    pub settlement: Settlement,
}

/// `scopf.json` of `scopf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopfDoc {
    pub version: u32,
    pub case: String,
    pub mode: ScMode,
    pub epsilon: f64,
    pub result: ScopfResult,
}

/// Largest KKT residuals with the worst offenders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktSummary {
    pub max_stationarity: f64,
    pub max_complementarity: f64,
    pub max_feasibility: f64,
    pub dual_feasibility: f64,
    pub max_residual: f64,
    pub worst: Vec<(String, f64)>,
}

impl KktSummary {
    pub fn new(r: &KktReport, keep: usize) -> Self {
        let mut all: Vec<(String, f64)> = r
            .stationarity
            .iter()
            .map(|(k, v)| (format!("stationarity:{k}"), *v))
            .chain(r.complementarity.iter().map(|(k, v)| (format!("complementarity:{k}"), *v)))
            .chain(r.feasibility.iter().map(|(k, v)| (format!("feasibility:{k}"), *v)))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(keep);
        KktSummary {
            max_stationarity: r.max_stationarity,
            max_complementarity: r.max_complementarity,
            max_feasibility: r.max_feasibility,
            dual_feasibility: r.dual_feasibility,
            max_residual: r.max_residual,
            worst: all,
        }
    }
}

/// `violations.json` of `validate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateDoc {
    pub version: u32,
    pub case: String,
    pub policy: BalancingPolicy,
    pub epsilon: f64,
    pub violations: ViolationReport,
    pub kkt: KktSummary,
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub policy: BalancingPolicy,
    pub status: String,
    pub objective: Option<f64>,
    /// λD.
    pub consumer_payment: Option<f64>,
    /// λW.
    pub res_payment: Option<f64>,
    /// Σ_i Π_i.
    pub gen_profit: Option<f64>,
    pub adequacy_gap: Option<f64>,
    pub congestion_rent: Option<f64>,
    /// Change of λD against the SW-SB clearing at the same scale, percent.
    pub delta_consumer_payment_percent: Option<f64>,
    pub convex_gap_percent: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusPriceRow {
    pub bus: i64,
    pub demand: f64,
    pub lambda: Option<f64>,
    pub lambda_closed_form: Option<f64>,
}

/// RES-indexed prices. System-wide prices are split by the covariance
/// shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResPriceRow {
    pub res_bus: i64,
    pub forecast: f64,
    pub sigma: f64,
    pub lambda: Option<f64>,
    pub chi: Option<f64>,
    pub chi_minus: Option<f64>,
    pub chi_plus: Option<f64>,
    pub beta: Option<f64>,
    pub beta_minus: Option<f64>,
    pub beta_plus: Option<f64>,
    pub balancing_cost: f64,
    pub marginal_cost_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopfPriceRow {
    pub gen_bus: i64,
    pub p0: f64,
    pub r_up: f64,
    pub r_dw: f64,
    pub pi_p: f64,
    pub pi_sc: f64,
    pub pi_p_sc: f64,
    pub pi_sc_alt: f64,
    pub lambda_base: f64,
    pub pi_up: Option<f64>,
    pub pi_dw: Option<f64>,
}

fn r(x: f64) -> f64 {
    round_sig(x)
}

fn ro(x: Option<f64>) -> Option<f64> {
    x.map(round_sig)
}

pub fn bus_price_rows(case: &GridCase, prices: &PriceSet, closed: &PriceSet) -> Vec<BusPriceRow> {
    case.buses
        .iter()
        .enumerate()
        .map(|(b, bus)| BusPriceRow {
            bus: bus.id,
            demand: r(bus.demand),
            lambda: ro(prices.lambda[b]),
            lambda_closed_form: ro(closed.lambda[b]),
        })
        .collect()
}

pub fn res_price_rows(
    case: &GridCase,
    prices: &PriceSet,
    balancing_cost: &[f64],
    marginal: Option<&[ResMarginal]>,
) -> Vec<ResPriceRow> {
    let col = |u: usize, dir: Direction| -> Option<f64> {
        prices.columns.iter().zip(&prices.chi).find_map(|(c, &x)| match *c {
            Column::Node { res, dir: d, .. } if res == u && d == dir => Some(x),
            Column::System(d) if d == dir => {
                let share = match dir {
                    Direction::Both => prices.beta.as_ref(),
                    Direction::Minus => prices.beta_minus.as_ref(),
                    Direction::Plus => prices.beta_plus.as_ref(),
                };
                share.map(|b| b[u] * x)
            }
            _ => None,
        })
    };
    case.res_units
        .iter()
        .enumerate()
        .map(|(u, unit)| ResPriceRow {
            res_bus: unit.bus,
            forecast: r(case.forecast(u)),
            sigma: r(case.sigma(u)),
            lambda: ro(prices.lambda_at(case, unit.bus)),
            chi: ro(col(u, Direction::Both)),
            chi_minus: ro(col(u, Direction::Minus)),
            chi_plus: ro(col(u, Direction::Plus)),
            beta: ro(prices.beta.as_ref().map(|b| b[u])),
            beta_minus: ro(prices.beta_minus.as_ref().map(|b| b[u])),
            beta_plus: ro(prices.beta_plus.as_ref().map(|b| b[u])),
            balancing_cost: r(balancing_cost.get(u).copied().unwrap_or(0.0)),
            marginal_cost_rate: ro(marginal.and_then(|m| m.get(u)).map(|m| m.cost_rate)),
        })
        .collect()
}

pub fn scopf_price_rows(case: &GridCase, res: &ScopfResult) -> Vec<ScopfPriceRow> {
    let p = &res.prices;
    case.generators
        .iter()
        .enumerate()
        .map(|(i, g)| ScopfPriceRow {
            gen_bus: g.bus,
            p0: r(res.states[0].p[i]),
            r_up: r(res.r_up[i]),
            r_dw: r(res.r_dw[i]),
            pi_p: r(p.pi_p[i]),
            pi_sc: r(p.pi_sc[i]),
            pi_p_sc: r(p.pi_p_sc[i]),
            pi_sc_alt: r(p.pi_sc_alt[i]),
            lambda_base: r(p.lambda_base[i]),
            pi_up: ro(p.pi_up.as_ref().map(|v| v[i])),
            pi_dw: ro(p.pi_dw.as_ref().map(|v| v[i])),
        })
        .collect()
}

/// Trace rows with rounded values.
pub fn rounded_trace(trace: &[TraceRow]) -> Vec<TraceRow> {
    trace
        .iter()
        .map(|t| TraceRow {
            iteration: t.iteration,
            lower: r(t.lower),
            upper: r(t.upper),
            gap_percent: r(t.gap_percent),
            best_upper: r(t.best_upper),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Doc {
        version: u32,
        zeta: f64,
        alpha: Vec<f64>,
        missing: Option<f64>,
    }

    #[test]
    fn rounding_keeps_twelve_digits() {
        assert_eq!(round_sig(1.0 / 3.0), 0.333333333333);
        assert_eq!(round_sig(123456.7890123456), 123456.789012);
        assert_eq!(round_sig(0.0), 0.0);
        assert!(round_sig(f64::NAN).is_nan());
        assert_eq!(round_sig(round_sig(2.0 / 7.0)), round_sig(2.0 / 7.0));
    }

    #[test]
    fn canonical_json_sorted_and_stable() {
        let d = Doc { version: 1, zeta: 2.0 / 3.0, alpha: vec![1e-20 / 3.0, 7.0], missing: None };
        let a = to_canonical_json(&d).unwrap();
        assert_eq!(a, to_canonical_json(&d).unwrap());
        assert!(a.find("\"alpha\"").unwrap() < a.find("\"zeta\"").unwrap());
        assert!(a.contains("0.666666666667"));
    }

    #[test]
    fn round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc.json");
        let d = Doc { version: 1, zeta: 0.25, alpha: vec![1.0, 2.5], missing: Some(3.0) };
        write_json(&path, &d).unwrap();
        let back: Doc = read_json(&path).unwrap();
        assert_eq!(back, d);
        let first = fs::read_to_string(&path).unwrap();
        write_json(&path, &back).unwrap();
        assert_eq!(first, fs::read_to_string(&path).unwrap());
        fs::write(&path, r#"{"version": 2, "zeta": 1, "alpha": [], "missing": null}"#).unwrap();
        assert!(matches!(read_json::<Doc>(&path), Err(OutputError::Version { found: Some(2), .. })));
    }

    #[test]
    fn csv_round_trip() {
        #[derive(Debug, PartialEq, Serialize, Deserialize)]
        struct Row {
            a: i64,
            b: Option<f64>,
            c: String,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![Row { a: 1, b: Some(0.5), c: "x".into() }, Row { a: 2, b: None, c: "y z".into() }];
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_csv::<Row>(&path).unwrap(), rows);
    }
}
