//! Numerical checks that do not trust the solver: Monte-Carlo violation
//! rates of the chance constraints, KKT residuals of a solution, and
//! finite-difference estimates of the prices.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, SolveOptions, SolveStatus, Solution};
use crate::grid::GridCase;
use crate::market::{balance_row, build_opf, DispatchResult, MarketError};
use crate::uncertainty::{BalancingPolicy, UncertaintyModel};

/// Samples per reproducibility shard. Shard `s` draws from ChaCha stream `s`
/// of the seed, so reports do not depend on the thread count.
pub const SHARD: usize = 10_000;
/// Default Monte-Carlo sample count.
pub const DEFAULT_SAMPLES: usize = 100_000;
/// Smallest sample count for which a comparison with ε is meaningful.
pub const MIN_ASSERT_SAMPLES: usize = 10_000;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("dispatch has {found} generators, case has {expected}")]
    Shape { expected: usize, found: usize },
    #[error("base solve returned {0}")]
    BaseSolve(SolveStatus),
    #[error("unknown price target '{0}'")]
    Target(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenViolation {
    pub bus: i64,
    pub epsilon: f64,
    /// Empirical `P[p_i(ω) > P̄_i]`.
    pub over_rate: f64,
    /// Empirical `P[p_i(ω) < P_i]`.
    pub under_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub policy: BalancingPolicy,
    pub samples: usize,
    pub seed: u64,
    pub generators: Vec<GenViolation>,
    /// Largest `|Σ_i recourse_i − Σ_u ω_u|` over all samples.
    pub max_balance_residual: f64,
}

impl ViolationReport {
    pub fn max_rate(&self) -> f64 {
        self.generators.iter().map(|g| g.over_rate.max(g.under_rate)).fold(0.0, f64::max)
    }

    /// Whether every empirical rate is within its ε.
    pub fn within_targets(&self) -> bool {
        self.generators.iter().all(|g| g.over_rate <= g.epsilon && g.under_rate <= g.epsilon)
    }
}

/// Applies the policy's affine recourse `p_i(ω) = p_i − Ω·A_i` to `n`
/// Gaussian error draws and counts capacity violations.
pub fn monte_carlo(
    case: &GridCase,
    dispatch: &DispatchResult,
    unc: &UncertaintyModel,
    n: usize,
    seed: u64,
) -> Result<ViolationReport, ValidationError> {
    let ng = case.generators.len();
    if dispatch.p.len() != ng {
        return Err(ValidationError::Shape { expected: ng, found: dispatch.p.len() });
    }
    let tol = 1e-9;
    let shards = n.div_ceil(SHARD);
    let counts = (0..shards)
        .into_par_iter()
        .map(|s| {
            let len = SHARD.min(n - s * SHARD);
            let mut over = vec![0usize; ng];
            let mut under = vec![0usize; ng];
            let mut resid: f64 = 0.0;
            if unc.num_res() == 0 {
                for (i, g) in case.generators.iter().enumerate() {
                    over[i] = if dispatch.p[i] > g.p_max + tol { len } else { 0 };
                    under[i] = if dispatch.p[i] < g.p_min - tol { len } else { 0 };
                }
                return (over, under, resid);
            }
            let omega = unc.sample_nodal(len, seed, s as u64);
            let mut buf = vec![0.0; unc.num_res()];
            for r in 0..len {
                for (u, b) in buf.iter_mut().enumerate() {
                    *b = omega[(r, u)];
                }
                let cols = unc.columns_from_nodal(&buf);
                let mut total = 0.0;
                for (i, g) in case.generators.iter().enumerate() {
                    let rec: f64 = cols.iter().zip(&dispatch.alpha[i]).map(|(w, a)| w * a).sum();
                    total += rec;
                    let p = dispatch.p[i] - rec;
                    if p > g.p_max + tol {
                        over[i] += 1;
                    }
                    if p < g.p_min - tol {
                        under[i] += 1;
                    }
                }
                if !cols.is_empty() {
                    resid = resid.max((total - buf.iter().sum::<f64>()).abs());
                }
            }
            (over, under, resid)
        })
        .reduce(
            || (vec![0; ng], vec![0; ng], 0.0),
            |mut a, b| {
                for i in 0..ng {
                    a.0[i] += b.0[i];
                    a.1[i] += b.1[i];
                }
                (a.0, a.1, a.2.max(b.2))
            },
        );
    let denom = n.max(1) as f64;
    Ok(ViolationReport {
        policy: dispatch.policy,
        samples: n,
        seed,
        generators: case
            .generators
            .iter()
            .enumerate()
            .map(|(i, g)| GenViolation {
                bus: g.bus,
                epsilon: unc.risk.epsilon(g.bus),
                over_rate: counts.0[i] as f64 / denom,
                under_rate: counts.1[i] as f64 / denom,
            })
            .collect(),
        max_balance_residual: counts.2,
    })
}

/// KKT residuals of a primal-dual pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Gradient of the Lagrangian per variable, scaled by `max(1, ‖∇f‖∞)`.
    pub stationarity: BTreeMap<String, f64>,
    /// Multiplier times slack per inequality and cone row.
    pub complementarity: BTreeMap<String, f64>,
    /// Primal violation per row, scaled by `max(1, |rhs|)`.
    pub feasibility: BTreeMap<String, f64>,
    /// Negative multipliers or cone duals outside the cone.
    pub dual_feasibility: f64,
    pub max_stationarity: f64,
    pub max_complementarity: f64,
    pub max_feasibility: f64,
    pub max_residual: f64,
}

fn maxv(m: &BTreeMap<String, f64>) -> f64 {
    m.values().copied().fold(0.0, f64::max)
}

/// Checks stationarity, complementarity and primal/dual feasibility.
///
/// Stationarity reads `∇f − Σ y aᵉ + Σ μ aˡ − ν_lo + ν_up − Σ (z₀ h + Wᵀ z̄) = 0`
/// under the crate's sign convention.
pub fn kkt_audit(program: &ConicProgram, sol: &Solution) -> KktReport {
    let x = &sol.x;
    let n = program.num_vars();
    let grad = program.objective_gradient(x);
    let mut g = grad.clone();
    for (r, &y) in program.eq_rows().iter().zip(&sol.eq_duals) {
        for &(v, c) in &r.terms {
            g[v.0] -= y * c;
        }
    }
    for (r, &mu) in program.le_rows().iter().zip(&sol.le_duals) {
        for &(v, c) in &r.terms {
            g[v.0] += mu * c;
        }
    }
    for k in 0..n {
        g[k] += sol.upper_bound_duals.get(k).copied().unwrap_or(0.0) - sol.lower_bound_duals.get(k).copied().unwrap_or(0.0);
    }
    let mut dual_inf: f64 = 0.0;
    let mut rep = KktReport::default();
    for (s, z) in program.soc_rows().iter().zip(&sol.soc_duals) {
        for &(v, c) in &s.head {
            g[v.0] -= z[0] * c;
        }
        for (k, (terms, _)) in s.components.iter().enumerate() {
            for &(v, c) in terms {
                g[v.0] -= z[k + 1] * c;
            }
        }
        let zn = z[1..].iter().map(|a| a * a).sum::<f64>().sqrt();
        dual_inf = dual_inf.max(zn - z[0]);
        let (head, norm) = program.soc_values(s, x);
        let mut comp = z[0] * head;
        for (k, (terms, d)) in s.components.iter().enumerate() {
            comp += z[k + 1] * (ConicProgram::row_activity(terms, x) + d);
        }
        rep.complementarity.insert(s.name.clone(), comp.abs() / head.abs().max(1.0));
        rep.feasibility.insert(s.name.clone(), (norm - head).max(0.0) / s.head_offset.abs().max(1.0));
    }
    let scale = grad.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for (k, var) in program.variables().iter().enumerate() {
        rep.stationarity.insert(var.name.clone(), g[k].abs() / scale);
        let lo = (var.lower - x[k]).max(0.0);
        let up = (x[k] - var.upper).max(0.0);
        if lo > 0.0 || up > 0.0 {
            rep.feasibility.insert(format!("bound:{}", var.name), lo.max(up) / var.lower.abs().max(var.upper.abs()).max(1.0));
        }
        let nl = sol.lower_bound_duals.get(k).copied().unwrap_or(0.0);
        let nu = sol.upper_bound_duals.get(k).copied().unwrap_or(0.0);
        dual_inf = dual_inf.max(-nl).max(-nu);
        let mut c: f64 = 0.0;
        if var.lower.is_finite() && var.lower != var.upper {
            c = c.max((nl * (x[k] - var.lower)).abs());
        }
        if var.upper.is_finite() && var.lower != var.upper {
            c = c.max((nu * (var.upper - x[k])).abs());
        }
        if c > 0.0 {
            rep.complementarity.insert(format!("bound:{}", var.name), c / scale);
        }
    }
    for r in program.eq_rows() {
        let a = ConicProgram::row_activity(&r.terms, x);
        rep.feasibility.insert(r.name.clone(), (a - r.rhs).abs() / r.rhs.abs().max(1.0));
    }
    for (r, &mu) in program.le_rows().iter().zip(&sol.le_duals) {
        let a = ConicProgram::row_activity(&r.terms, x);
        let sc = r.rhs.abs().max(1.0);
        rep.feasibility.insert(r.name.clone(), (a - r.rhs).max(0.0) / sc);
        rep.complementarity.insert(r.name.clone(), (mu * (r.rhs - a)).abs() / sc);
        dual_inf = dual_inf.max(-mu);
    }
    rep.dual_feasibility = dual_inf.max(0.0);
    rep.max_stationarity = maxv(&rep.stationarity);
    rep.max_complementarity = maxv(&rep.complementarity);
    rep.max_feasibility = maxv(&rep.feasibility);
    rep.max_residual = rep
        .max_stationarity
        .max(rep.max_complementarity)
        .max(rep.max_feasibility)
        .max(rep.dual_feasibility);
    rep
}

/// A price to re-derive by finite differences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriceTarget {
    /// λ at a bus, via its demand.
    Lambda(i64),
    /// χ of balancing column `j`, via the adequacy right-hand side.
    Chi(usize),
    /// Any named linear row.
    Row(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub row: String,
    pub dual: f64,
    /// `d f*/d b` by central differences; `None` when skipped.
    pub fd: Option<f64>,
    /// `|price − FD| / max(1, |price|)` with the price in `∂f*/∂b` form.
    pub rel_error: Option<f64>,
    pub stable: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    /// Largest relative error over stable targets.
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().filter_map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn num_checked(&self) -> usize {
        self.entries.iter().filter(|e| e.rel_error.is_some()).count()
    }
}

/// Rows whose multiplier exceeds `tol`.
fn binding_set(program: &ConicProgram, sol: &Solution, tol: f64) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (r, &mu) in program.le_rows().iter().zip(&sol.le_duals) {
        if mu > tol {
            out.insert(r.name.clone());
        }
    }
    for (s, z) in program.soc_rows().iter().zip(&sol.soc_duals) {
        if z[0] > tol {
            out.insert(s.name.clone());
        }
    }
    for (k, v) in program.variables().iter().enumerate() {
        if sol.lower_bound_duals[k] > tol || sol.upper_bound_duals[k] > tol {
            out.insert(format!("bound:{}", v.name));
        }
    }
    out
}

/// Multiplier above which a row counts as binding.
pub const ACTIVE_TOL: f64 = 1e-4;

/// Compares solver duals with central finite differences of the optimal
/// value. `h_rel` scales the step by `max(1, |rhs|)`. Targets whose binding
/// set changes between `b − h`, `b` and `b + h` are reported and skipped.
pub fn price_fd_oracle(
    policy: BalancingPolicy,
    case: &GridCase,
    unc: &UncertaintyModel,
    targets: &[PriceTarget],
    h_rel: f64,
    opts: &SolveOptions,
) -> Result<FdReport, ValidationError> {
    let model = build_opf(policy, case, unc)?;
    let program = &model.program;
    let base = conic::solve(program, opts)?;
    if base.status != SolveStatus::Optimal {
        return Err(ValidationError::BaseSolve(base.status));
    }
    let base_set = binding_set(program, &base, ACTIVE_TOL);
    let rows: Vec<String> = targets
        .iter()
        .map(|t| match t {
            PriceTarget::Lambda(b) => Ok(balance_row(*b)),
            PriceTarget::Chi(j) => unc
                .columns
                .get(*j)
                .map(|c| c.row_name())
                .ok_or_else(|| ValidationError::Target(format!("chi column {j}"))),
            PriceTarget::Row(r) => Ok(r.clone()),
        })
        .collect::<Result<_, _>>()?;
    let entries = rows
        .par_iter()
        .map(|row| -> Result<FdEntry, ValidationError> {
            let handle = program.row(row).map_err(|_| ValidationError::Target(row.clone()))?;
            let b = program.rhs(row)?;
            let h = h_rel * b.abs().max(1.0);
            // ∂f*/∂b of the row: the equality dual, or minus the multiplier.
            let price = match handle.kind {
                conic::RowKind::Eq => base.dual(row).unwrap_or(0.0),
                _ => -base.dual(row).unwrap_or(0.0),
            };
            let mut vals = [0.0; 2];
            let mut stable = true;
            let mut solved = true;
            let mut note = None;
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut p = program.clone();
                p.set_rhs(row, b + sign * h)?;
                let s = conic::solve(&p, opts)?;
                if s.status != SolveStatus::Optimal {
                    stable = false;
                    solved = false;
                    note = Some(format!("perturbed solve returned {}", s.status));
                    break;
                }
                if binding_set(&p, &s, ACTIVE_TOL) != base_set {
                    stable = false;
                    note = Some("binding set changes under the perturbation".into());
                }
                vals[k] = s.objective;
            }
            let fd = solved.then(|| (vals[0] - vals[1]) / (2.0 * h));
            let rel_error = if stable { fd.map(|f| (price - f).abs() / price.abs().max(1.0)) } else { None };
            Ok(FdEntry {
                row: row.clone(),
                dual: base.dual(row).unwrap_or(0.0),
                fd,
                rel_error,
                stable,
                note,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FdReport { entries })
}

/// Targets for every loaded bus and every balancing column.
pub fn default_targets(case: &GridCase, unc: &UncertaintyModel) -> Vec<PriceTarget> {
    let mut t: Vec<PriceTarget> = case.buses.iter().filter(|b| b.demand > 0.0).map(|b| PriceTarget::Lambda(b.id)).collect();
    t.extend((0..unc.num_columns()).map(PriceTarget::Chi));
    t
}
