//! Forecast-error statistics and the per-policy mean vector `M` and
//! covariance `Σ` of the stacked balancing columns.
//!
//! Each policy balances a different set of random quantities, one adequacy
//! column per quantity:
//!
//! | policy | columns |
//! |--------|---------|
//! | `det`    | none |
//! | `sw-sb`  | total error `Ω = Σ_u ω_u` |
//! | `n2n-sb` | nodal errors `ω_u` |
//! | `sw-ab`  | `Ω⁻ = Σ_u ω_u⁻`, `Ω⁺ = Σ_u ω_u⁺` |
//! | `n2n-ab` | `ω_1⁻ … ω_U⁻, ω_1⁺ … ω_U⁺` |
//!
//! Asymmetric policies split each nodal error into a non-positive and a
//! non-negative part, each modelled as a half-normal with mean `∓μ_u` and
//! standard deviation `σ_u^±` (see [`split_truncated`]).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridCase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BalancingPolicy {
    #[serde(rename = "det")]
    Deterministic,
    #[serde(rename = "sw-sb")]
    SwSb,
    #[serde(rename = "n2n-sb")]
    N2nSb,
    #[serde(rename = "sw-ab")]
    SwAb,
    #[serde(rename = "n2n-ab")]
    N2nAb,
}

impl BalancingPolicy {
    pub const ALL: [BalancingPolicy; 5] = [
        BalancingPolicy::Deterministic,
        BalancingPolicy::SwSb,
        BalancingPolicy::N2nSb,
        BalancingPolicy::SwAb,
        BalancingPolicy::N2nAb,
    ];

    pub fn is_asymmetric(self) -> bool {
        matches!(self, BalancingPolicy::SwAb | BalancingPolicy::N2nAb)
    }

    pub fn is_system_wide(self) -> bool {
        matches!(self, BalancingPolicy::SwSb | BalancingPolicy::SwAb)
    }

    pub fn is_stochastic(self) -> bool {
        self != BalancingPolicy::Deterministic
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BalancingPolicy::Deterministic => "det",
            BalancingPolicy::SwSb => "sw-sb",
            BalancingPolicy::N2nSb => "n2n-sb",
            BalancingPolicy::SwAb => "sw-ab",
            BalancingPolicy::N2nAb => "n2n-ab",
        }
    }
}

impl fmt::Display for BalancingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BalancingPolicy {
    type Err = UncertaintyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BalancingPolicy::ALL
            .into_iter()
            .find(|p| p.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| UncertaintyError::UnknownPolicy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Both,
    Minus,
    Plus,
}

impl Direction {
    fn suffix(self) -> &'static str {
        match self {
            Direction::Both => "",
            Direction::Minus => "-",
            Direction::Plus => "+",
        }
    }
}

/// One balancing column: the random quantity an adequacy row covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Column {
    System(Direction),
    /// RES index `res` (position in the case) located at bus `bus`.
    Node { res: usize, bus: i64, dir: Direction },
}

impl Column {
    /// Name of the adequacy row, e.g. `alphasum`, `alphasum-@8`.
    pub fn row_name(&self) -> String {
        match self {
            Column::System(d) => format!("alphasum{}", d.suffix()),
            Column::Node { bus, dir, .. } => format!("alphasum{}@{}", dir.suffix(), bus),
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Column::System(d) => *d,
            Column::Node { dir, .. } => *dir,
        }
    }

    /// Short label used in output tables, e.g. `sys+`, `8-`.
    pub fn label(&self) -> String {
        match self {
            Column::System(d) => format!("sys{}", d.suffix()),
            Column::Node { bus, dir, .. } => format!("{}{}", bus, dir.suffix()),
        }
    }
}

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("unknown balancing policy '{0}'")]
    UnknownPolicy(String),
    #[error("negative sigma {0}")]
    NegativeSigma(f64),
    #[error("epsilon must lie in (0, 0.5], got {0}")]
    Epsilon(f64),
    #[error("forecast series for node {0} is empty or has fewer than 2 samples")]
    EmptySeries(i64),
    #[error("forecast series for node {node}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { node: i64, timestamp: String },
    #[error("invalid correlation matrix: {0}")]
    Correlation(String),
    #[error("non-PSD covariance (smallest eigenvalue {min_eig:e}, trace {trace:e})")]
    NonPsd { min_eig: f64, trace: f64 },
    #[error("policy {0} needs at least one RES unit")]
    NoRes(BalancingPolicy),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalErrorStats {
    pub node: i64,
    pub sigma: f64,
    pub mu_trunc: f64,
    pub sigma_minus: f64,
    pub sigma_plus: f64,
    pub kappa: Option<f64>,
}

impl NodalErrorStats {
    pub fn from_sigma(node: i64, sigma: f64, kappa: Option<f64>) -> Result<Self, UncertaintyError> {
        let (mu, spm) = split_truncated(sigma)?;
        Ok(NodalErrorStats {
            node,
            sigma,
            mu_trunc: mu,
            sigma_minus: spm,
            sigma_plus: spm,
            kappa,
        })
    }
}

/// Truncated split of a zero-mean normal error with standard deviation
/// `sigma`: returns `(μ, σ^±)` with `μ = σ·sqrt(2/π)` and
/// `σ^± = σ·sqrt((2π − 4)/(2π))`.
pub fn split_truncated(sigma: f64) -> Result<(f64, f64), UncertaintyError> {
    if !(sigma >= 0.0) {
        return Err(UncertaintyError::NegativeSigma(sigma));
    }
    let pi = std::f64::consts::PI;
    let mu = sigma * (2.0 / pi).sqrt();
    let spm = sigma * ((2.0 * pi - 4.0) / (2.0 * pi)).sqrt();
    Ok((mu, spm))
}

/// Distribution-free Chebyshev factor `sqrt((1 − ε)/ε)`.
pub fn chebyshev_z(epsilon: f64) -> Result<f64, UncertaintyError> {
    if !(epsilon > 0.0 && epsilon <= 0.5) {
        return Err(UncertaintyError::Epsilon(epsilon));
    }
    Ok(((1.0 - epsilon) / epsilon).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSeries {
    pub node: i64,
    pub timestamps: Vec<String>,
    pub forecast: Vec<f64>,
    pub actual: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct ForecastRow {
    node: i64,
    timestamp: String,
    forecast: f64,
    actual: f64,
}

/// Reads a `node,timestamp,forecast,actual` CSV into one series per node.
pub fn read_forecast_csv(path: impl AsRef<Path>) -> Result<Vec<ForecastSeries>, UncertaintyError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut by_node: BTreeMap<i64, ForecastSeries> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: ForecastRow = row?;
        let s = by_node.entry(row.node).or_insert_with(|| ForecastSeries {
            node: row.node,
            timestamps: Vec::new(),
            forecast: Vec::new(),
            actual: Vec::new(),
        });
        s.timestamps.push(row.timestamp);
        s.forecast.push(row.forecast);
        s.actual.push(row.actual);
    }
    Ok(by_node.into_values().collect())
}

/// Sample statistics of `actual − forecast` (n − 1 normalisation).
pub fn estimate_stats(series: &ForecastSeries) -> Result<NodalErrorStats, UncertaintyError> {
    let n = series.forecast.len();
    if n < 2 || series.actual.len() != n || series.timestamps.len() != n {
        return Err(UncertaintyError::EmptySeries(series.node));
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in &series.timestamps {
        if !seen.insert(t) {
            return Err(UncertaintyError::DuplicateTimestamp {
                node: series.node,
                timestamp: t.clone(),
            });
        }
    }
    let err: Vec<f64> = series
        .actual
        .iter()
        .zip(&series.forecast)
        .map(|(a, f)| a - f)
        .collect();
    let mean = err.iter().sum::<f64>() / n as f64;
    let var = err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sigma = var.sqrt();
    let mean_forecast = series.forecast.iter().sum::<f64>() / n as f64;
    let kappa = if mean_forecast != 0.0 {
        Some(sigma / mean_forecast)
    } else {
        None
    };
    NodalErrorStats::from_sigma(series.node, sigma, kappa)
}

/// Statistics taken from the RES data of a case (`κ_u = σ_u / w_u`).
pub fn stats_from_case(case: &GridCase) -> Vec<NodalErrorStats> {
    (0..case.res_units.len())
        .map(|k| {
            let w = case.forecast(k);
            let s = case.sigma(k);
            let kappa = if w > 0.0 { Some(s / w) } else { None };
            NodalErrorStats::from_sigma(case.res_units[k].bus, s, kappa).expect("validated sigma")
        })
        .collect()
}

/// Reads a square correlation CSV whose header row and first column carry
/// node ids, reordered to `nodes`.
pub fn read_correlation_csv(
    path: impl AsRef<Path>,
    nodes: &[i64],
) -> Result<DMatrix<f64>, UncertaintyError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<i64> = rdr
        .headers()?
        .iter()
        .skip(1)
        .map(|h| {
            h.trim()
                .parse::<i64>()
                .map_err(|_| UncertaintyError::Correlation(format!("bad header node id '{h}'")))
        })
        .collect::<Result<_, _>>()?;
    let mut rows: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id: i64 = rec
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| UncertaintyError::Correlation("bad row node id".into()))?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| UncertaintyError::Correlation(format!("bad value '{v}'")))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != header.len() {
            return Err(UncertaintyError::Correlation(format!("row {id} has wrong length")));
        }
        rows.insert(id, vals);
    }
    let col_of: BTreeMap<i64, usize> = header.iter().enumerate().map(|(k, &h)| (h, k)).collect();
    let n = nodes.len();
    let mut m = DMatrix::zeros(n, n);
    for (a, u) in nodes.iter().enumerate() {
        let row = rows
            .get(u)
            .ok_or_else(|| UncertaintyError::Correlation(format!("missing row for node {u}")))?;
        for (b, v) in nodes.iter().enumerate() {
            let c = col_of
                .get(v)
                .ok_or_else(|| UncertaintyError::Correlation(format!("missing column for node {v}")))?;
            m[(a, b)] = row[*c];
        }
    }
    validate_correlation(&m)?;
    Ok(m)
}

pub fn validate_correlation(z: &DMatrix<f64>) -> Result<(), UncertaintyError> {
    if z.nrows() != z.ncols() {
        return Err(UncertaintyError::Correlation("matrix is not square".into()));
    }
    let n = z.nrows();
    for i in 0..n {
        if (z[(i, i)] - 1.0).abs() > 1e-9 {
            return Err(UncertaintyError::Correlation(format!("diagonal entry {i} is not 1")));
        }
        for j in 0..n {
            if !z[(i, j)].is_finite() || z[(i, j)].abs() > 1.0 + 1e-12 {
                return Err(UncertaintyError::Correlation(format!("entry ({i},{j}) outside [-1,1]")));
            }
            if (z[(i, j)] - z[(j, i)]).abs() > 1e-9 {
                return Err(UncertaintyError::Correlation("matrix is not symmetric".into()));
            }
        }
    }
    let (min_eig, trace) = min_eigen(z);
    if min_eig < -1e-10 * trace.max(1.0) {
        return Err(UncertaintyError::Correlation(format!(
            "non-PSD correlation input (smallest eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

fn min_eigen(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    (min, m.trace())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// Factor `F` with `Σ = F Fᵀ`. Columns belonging to zero eigenvalues are
/// dropped. Negative eigenvalues within the PSD tolerance are clamped.
pub fn psd_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>, UncertaintyError> {
    let n = sigma.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let s = symmetrize(sigma);
    let trace = s.trace();
    if is_diagonal(&s) {
        let keep: Vec<usize> = (0..n).filter(|&i| s[(i, i)] > 0.0).collect();
        if let Some(i) = (0..n).find(|&i| s[(i, i)] < -1e-10 * trace.max(0.0)) {
            return Err(UncertaintyError::NonPsd {
                min_eig: s[(i, i)],
                trace,
            });
        }
        let mut f = DMatrix::zeros(n, keep.len());
        for (c, &i) in keep.iter().enumerate() {
            f[(i, c)] = s[(i, i)].sqrt();
        }
        return Ok(f);
    }
    let eig = SymmetricEigen::new(s);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * trace.max(0.0) {
        return Err(UncertaintyError::NonPsd { min_eig: min, trace });
    }
    let cutoff = 1e-14 * trace.max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > cutoff).collect();
    let mut f = DMatrix::zeros(n, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let scale = eig.eigenvalues[k].sqrt();
        for i in 0..n {
            f[(i, c)] = eig.eigenvectors[(i, k)] * scale;
        }
    }
    Ok(f)
}

/// Risk levels `ε_i`, one default plus per-generator overrides keyed by bus.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskLevels {
    pub default_epsilon: f64,
    pub overrides: BTreeMap<i64, f64>,
}

impl RiskLevels {
    pub fn uniform(epsilon: f64) -> Result<Self, UncertaintyError> {
        chebyshev_z(epsilon)?;
        Ok(RiskLevels {
            default_epsilon: epsilon,
            overrides: BTreeMap::new(),
        })
    }

    pub fn epsilon(&self, gen_bus: i64) -> f64 {
        self.overrides.get(&gen_bus).copied().unwrap_or(self.default_epsilon)
    }

    pub fn z(&self, gen_bus: i64) -> f64 {
        chebyshev_z(self.epsilon(gen_bus)).expect("validated epsilon")
    }

    pub fn set(&mut self, gen_bus: i64, epsilon: f64) -> Result<(), UncertaintyError> {
        chebyshev_z(epsilon)?;
        self.overrides.insert(gen_bus, epsilon);
        Ok(())
    }
}

impl Default for RiskLevels {
    fn default() -> Self {
        RiskLevels::uniform(0.01).expect("valid default")
    }
}

/// Mean and covariance of the balancing columns for one policy.
#[derive(Debug, Clone)]
pub struct UncertaintyModel {
    pub policy: BalancingPolicy,
    pub stats: Vec<NodalErrorStats>,
    pub correlation: DMatrix<f64>,
    /// Symmetric nodal covariance `ζ_uv σ_u σ_v`.
    pub nodal_cov: DMatrix<f64>,
    pub columns: Vec<Column>,
    pub mean_vector: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// `covariance = factor · factorᵀ`.
    pub factor: DMatrix<f64>,
    pub total_std: f64,
    pub nu: f64,
    pub risk: RiskLevels,
    nodal_factor: DMatrix<f64>,
}

/// Assembles the model for `policy`. `correlation = None` means ζ = I.
pub fn assemble(
    policy: BalancingPolicy,
    stats: &[NodalErrorStats],
    correlation: Option<&DMatrix<f64>>,
) -> Result<UncertaintyModel, UncertaintyError> {
    let u = stats.len();
    if policy.is_stochastic() && u == 0 {
        return Err(UncertaintyError::NoRes(policy));
    }
    let zeta = match correlation {
        Some(z) => {
            if z.nrows() != u {
                return Err(UncertaintyError::Correlation(format!(
                    "dimension {} does not match {} RES units",
                    z.nrows(),
                    u
                )));
            }
            validate_correlation(z)?;
            symmetrize(z)
        }
        None => DMatrix::identity(u, u),
    };
    for s in stats {
        if !(s.sigma >= 0.0) {
            return Err(UncertaintyError::NegativeSigma(s.sigma));
        }
    }
    let nodal_cov = DMatrix::from_fn(u, u, |a, b| zeta[(a, b)] * stats[a].sigma * stats[b].sigma);
    let nodal_factor = psd_factor(&nodal_cov)?;
    let nu: f64 = stats.iter().map(|s| s.mu_trunc).sum();

    let node_cols = |dir: Direction| -> Vec<Column> {
        stats
            .iter()
            .enumerate()
            .map(|(res, s)| Column::Node { res, bus: s.node, dir })
            .collect()
    };
    let asym_cov = || {
        DMatrix::from_fn(2 * u, 2 * u, |a, b| {
            let (ua, ma) = (a % u, a < u);
            let (ub, mb) = (b % u, b < u);
            if ua == ub && ma != mb {
                return 0.0;
            }
            let sa = if ma { stats[ua].sigma_minus } else { stats[ua].sigma_plus };
            let sb = if mb { stats[ub].sigma_minus } else { stats[ub].sigma_plus };
            zeta[(ua, ub)] * sa * sb
        })
    };
    let asym_mean = || {
        DVector::from_fn(2 * u, |a, _| {
            if a < u {
                -stats[a].mu_trunc
            } else {
                stats[a - u].mu_trunc
            }
        })
    };

    let (columns, mean_vector, covariance) = match policy {
        BalancingPolicy::Deterministic => (Vec::new(), DVector::zeros(0), DMatrix::zeros(0, 0)),
        BalancingPolicy::SwSb => {
            let s2 = nodal_cov.sum();
            (
                vec![Column::System(Direction::Both)],
                DVector::zeros(1),
                DMatrix::from_element(1, 1, s2),
            )
        }
        BalancingPolicy::N2nSb => (node_cols(Direction::Both), DVector::zeros(u), nodal_cov.clone()),
        BalancingPolicy::N2nAb => {
            let mut cols = node_cols(Direction::Minus);
            cols.extend(node_cols(Direction::Plus));
            (cols, asym_mean(), asym_cov())
        }
        BalancingPolicy::SwAb => {
            let full = asym_cov();
            let mut e = DMatrix::zeros(2, 2 * u);
            for k in 0..u {
                e[(0, k)] = 1.0;
                e[(1, u + k)] = 1.0;
            }
            let cov = &e * full * e.transpose();
            (
                vec![Column::System(Direction::Minus), Column::System(Direction::Plus)],
                DVector::from_vec(vec![-nu, nu]),
                cov,
            )
        }
    };
    let covariance = symmetrize(&covariance);
    let factor = psd_factor(&covariance)?;
    let total_std = covariance.sum().max(0.0).sqrt();
    Ok(UncertaintyModel {
        policy,
        stats: stats.to_vec(),
        correlation: zeta,
        nodal_cov,
        columns,
        mean_vector,
        covariance,
        factor,
        total_std,
        nu,
        risk: RiskLevels::default(),
        nodal_factor,
    })
}

/// Convenience: statistics from the case, ζ = I unless given.
pub fn assemble_for_case(
    policy: BalancingPolicy,
    case: &GridCase,
    correlation: Option<&DMatrix<f64>>,
) -> Result<UncertaintyModel, UncertaintyError> {
    let stats = stats_from_case(case);
    if !policy.is_stochastic() && stats.is_empty() {
        return assemble(policy, &[], None);
    }
    assemble(policy, &stats, correlation)
}

impl UncertaintyModel {
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self, UncertaintyError> {
        self.risk = RiskLevels::uniform(epsilon)?;
        Ok(self)
    }

    pub fn with_risk(mut self, risk: RiskLevels) -> Self {
        self.risk = risk;
        self
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn num_res(&self) -> usize {
        self.stats.len()
    }

    /// `z_i` for the generator at `gen_bus`.
    pub fn z(&self, gen_bus: i64) -> f64 {
        self.risk.z(gen_bus)
    }

    /// `S_i = sqrt(A_iᵀ Σ A_i)`.
    pub fn std_of(&self, a: &[f64]) -> f64 {
        let v = DVector::from_column_slice(a);
        (v.dot(&(&self.covariance * &v))).max(0.0).sqrt()
    }

    /// `M · A_i`.
    pub fn mean_of(&self, a: &[f64]) -> f64 {
        self.mean_vector.iter().zip(a).map(|(m, x)| m * x).sum()
    }

    /// Maps one nodal error realisation to the policy's column values.
    pub fn columns_from_nodal(&self, omega: &[f64]) -> Vec<f64> {
        let u = self.stats.len();
        match self.policy {
            BalancingPolicy::Deterministic => Vec::new(),
            BalancingPolicy::SwSb => vec![omega.iter().sum()],
            BalancingPolicy::N2nSb => omega.to_vec(),
            BalancingPolicy::N2nAb => {
                let mut v = Vec::with_capacity(2 * u);
                v.extend(omega.iter().map(|w| w.min(0.0)));
                v.extend(omega.iter().map(|w| w.max(0.0)));
                v
            }
            BalancingPolicy::SwAb => vec![
                omega.iter().map(|w| w.min(0.0)).sum(),
                omega.iter().map(|w| w.max(0.0)).sum(),
            ],
        }
    }

    /// `n × |U|` nodal Gaussian errors from stream `stream` of `seed`.
    pub fn sample_nodal(&self, n: usize, seed: u64, stream: u64) -> DMatrix<f64> {
        let u = self.stats.len();
        let r = self.nodal_factor.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut out = DMatrix::zeros(n, u);
        let mut g = vec![0.0; r];
        for row in 0..n {
            for x in g.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            for a in 0..u {
                let mut s = 0.0;
                for (c, gc) in g.iter().enumerate() {
                    s += self.nodal_factor[(a, c)] * gc;
                }
                out[(row, a)] = s;
            }
        }
        out
    }
}

/// `n` draws of the stacked column vector (rows = draws). Symmetric policies
/// draw multivariate normal errors; asymmetric ones draw symmetric nodal
/// errors and split them into sign parts.
pub fn sample_errors(model: &UncertaintyModel, n: usize, seed: u64) -> DMatrix<f64> {
    let nodal = model.sample_nodal(n, seed, 0);
    let k = model.num_columns();
    let mut out = DMatrix::zeros(n, k);
    let mut buf = vec![0.0; model.num_res()];
    for row in 0..n {
        for (a, b) in buf.iter_mut().enumerate() {
            *b = nodal[(row, a)];
        }
        for (c, v) in model.columns_from_nodal(&buf).into_iter().enumerate() {
            out[(row, c)] = v;
        }
    }
    out
}
