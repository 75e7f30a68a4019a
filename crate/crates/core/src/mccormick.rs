//! McCormick relaxation of the `p_i · α_ij` products in the asymmetric
//! expected cost, and the sequential box-tightening loop around it.
//!
//! The relaxed program keeps every constraint of the original clearing and
//! replaces each product by a variable `ψ` bounded by the four envelope rows.
//! Its optimum `x̂` is always feasible for the original clearing, so
//! `Ĉ(x̂) ≤ C(x̂)` brackets the true cost of the incumbent.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, SolveOptions, SolveStatus, VarId};
use crate::grid::GridCase;
use crate::market::{self, DispatchResult, MarketError, OpfModel};
use crate::uncertainty::{BalancingPolicy, UncertaintyModel};

pub const DEFAULT_SHRINK: f64 = 0.5;
/// Percent.
pub const DEFAULT_GAP_TOL: f64 = 0.01;
pub const DEFAULT_MAX_ITER: usize = 30;
/// Loosest tolerance for relaxation solves. Iterates are re-checked for
/// feasibility and priced with the exact objective.
pub const RELAX_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum McCormickError {
    #[error("invalid bounds: {0}")]
    Bounds(String),
    #[error("sequential convexification needs an asymmetric policy, got {0}")]
    Symmetric(BalancingPolicy),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("first relaxation failed with status {0}")]
    FirstSolve(SolveStatus),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

/// One product `coef · x · y` with a box on both factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Product {
    pub x: VarId,
    pub y: VarId,
    pub coef: f64,
    pub x_lb: f64,
    pub x_ub: f64,
    pub y_lb: f64,
    pub y_ub: f64,
}

/// Replaces each product in `program` by an envelope variable.
///
/// The product's objective term is removed and `coef · ψ` added, with
/// `ψ ≥ x_lb y + y_lb x − x_lb y_lb`, `ψ ≥ x_ub y + y_ub x − x_ub y_ub`,
/// `ψ ≤ x_ub y + y_lb x − x_ub y_lb` and `ψ ≤ x_lb y + y_ub x − x_lb y_ub`.
/// Both factors are restricted to their boxes.
pub fn envelope(program: &ConicProgram, products: &[Product]) -> Result<ConicProgram, McCormickError> {
    envelope_with(program, products, EnvelopeRows::Full)
}

/// Which envelope rows to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeRows {
    /// All four rows.
    Full,
    /// Only the two rows the objective pushes against: the under-estimators
    /// for a positive coefficient, the over-estimators for a negative one.
    /// The optimal value is the same as with all four rows, and the
    /// relaxation stays well conditioned once the box is narrow.
    ObjectiveSide,
}

pub fn envelope_with(
    program: &ConicProgram,
    products: &[Product],
    rows: EnvelopeRows,
) -> Result<ConicProgram, McCormickError> {
    let mut env = program.clone();
    for (k, pr) in products.iter().enumerate() {
        for (v, lb, ub) in [(pr.x, pr.x_lb, pr.x_ub), (pr.y, pr.y_lb, pr.y_ub)] {
            if !(lb.is_finite() && ub.is_finite()) || lb > ub {
                return Err(McCormickError::Bounds(format!("product {k}: box [{lb}, {ub}]")));
            }
            let var = &program.variables()[v.0];
            if var.lower == var.upper && (var.lower < lb || var.lower > ub) {
                return Err(McCormickError::Bounds(format!(
                    "fixed variable {} = {} outside [{lb}, {ub}]",
                    var.name, var.lower
                )));
            }
            let cur = &env.variables()[v.0];
            let (lo, hi) = (cur.lower.max(lb), cur.upper.min(ub));
            if lo > hi {
                return Err(McCormickError::Bounds(format!(
                    "box of {} does not meet its bounds",
                    cur.name
                )));
            }
            env.set_bounds(v, lo, hi)?;
        }
        env.take_quad(pr.x, pr.y);
        let xn = program.variables()[pr.x.0].name.clone();
        let yn = program.variables()[pr.y.0].name.clone();
        let tag = format!("{xn}*{yn}");
        let psi = env.free_var(format!("psi[{tag}]"))?;
        env.add_linear(psi, pr.coef);
        let (xl, xu, yl, yu) = (pr.x_lb, pr.x_ub, pr.y_lb, pr.y_ub);
        let under = rows == EnvelopeRows::Full || pr.coef > 0.0;
        let over = rows == EnvelopeRows::Full || pr.coef < 0.0;
        if under {
            // ψ − x_lb y − y_lb x ≥ −x_lb y_lb, written as ≤ rows.
            env.add_le(format!("mc1[{tag}]"), &[(psi, -1.0), (pr.y, xl), (pr.x, yl)], xl * yl)?;
            env.add_le(format!("mc2[{tag}]"), &[(psi, -1.0), (pr.y, xu), (pr.x, yu)], xu * yu)?;
        }
        if over {
            env.add_le(format!("mc3[{tag}]"), &[(psi, 1.0), (pr.y, -xu), (pr.x, -yl)], -xu * yl)?;
            env.add_le(format!("mc4[{tag}]"), &[(psi, 1.0), (pr.y, -xl), (pr.x, -yu)], -xl * yu)?;
        }
    }
    Ok(env)
}

/// Boxes on dispatch and participation for one relaxation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCormickBounds {
    pub p_lb: Vec<f64>,
    pub p_ub: Vec<f64>,
    /// Per generator, per column; empty for non-providers.
    pub a_lb: Vec<Vec<f64>>,
    pub a_ub: Vec<Vec<f64>>,
    pub shrink: f64,
    pub iteration: usize,
}

impl McCormickBounds {
    /// Physical box: `α ∈ [0, 1]` and `p` in the range the capacity rows
    /// allow for any `α`, `[P − Σ max(−M_j, 0), P̄ + Σ max(M_j, 0)]`.
    pub fn initial(case: &GridCase, unc: &UncertaintyModel, shrink: f64) -> Self {
        let k = unc.num_columns();
        let pos: f64 = unc.mean_vector.iter().map(|m| m.max(0.0)).sum();
        let neg: f64 = unc.mean_vector.iter().map(|m| (-m).max(0.0)).sum();
        let mut b = McCormickBounds {
            p_lb: Vec::new(),
            p_ub: Vec::new(),
            a_lb: Vec::new(),
            a_ub: Vec::new(),
            shrink,
            iteration: 0,
        };
        for g in &case.generators {
            let provider = g.is_provider() && k > 0;
            b.p_lb.push(g.p_min - if provider { neg } else { 0.0 });
            b.p_ub.push(g.p_max + if provider { pos } else { 0.0 });
            let n = if provider { k } else { 0 };
            b.a_lb.push(vec![0.0; n]);
            b.a_ub.push(vec![1.0; n]);
        }
        b
    }

    /// Shrinks every half-width by `shrink`, centred on the incumbent and
    /// clipped to the current box.
    pub fn tighten(&self, d: &DispatchResult) -> Self {
        fn shrink1(lb: f64, ub: f64, x: f64, s: f64) -> (f64, f64) {
            let half = 0.5 * (ub - lb) * s;
            let c = x.clamp(lb, ub);
            ((c - half).max(lb), (c + half).min(ub))
        }
        let mut next = self.clone();
        next.iteration += 1;
        for i in 0..self.p_lb.len() {
            let (l, u) = shrink1(self.p_lb[i], self.p_ub[i], d.p[i], self.shrink);
            next.p_lb[i] = l;
            next.p_ub[i] = u;
            for j in 0..self.a_lb[i].len() {
                let (l, u) = shrink1(self.a_lb[i][j], self.a_ub[i][j], d.alpha[i][j], self.shrink);
                next.a_lb[i][j] = l;
                next.a_ub[i][j] = u;
            }
        }
        next
    }

    pub fn contains(&self, d: &DispatchResult, tol: f64) -> bool {
        (0..self.p_lb.len()).all(|i| {
            d.p[i] >= self.p_lb[i] - tol
                && d.p[i] <= self.p_ub[i] + tol
                && (0..self.a_lb[i].len())
                    .all(|j| d.alpha[i][j] >= self.a_lb[i][j] - tol && d.alpha[i][j] <= self.a_ub[i][j] + tol)
        })
    }

    pub fn is_nested_in(&self, outer: &McCormickBounds) -> bool {
        let inside = |l: f64, u: f64, ol: f64, ou: f64| l >= ol && u <= ou && l <= u;
        (0..self.p_lb.len()).all(|i| {
            inside(self.p_lb[i], self.p_ub[i], outer.p_lb[i], outer.p_ub[i])
                && (0..self.a_lb[i].len())
                    .all(|j| inside(self.a_lb[i][j], self.a_ub[i][j], outer.a_lb[i][j], outer.a_ub[i][j]))
        })
    }
}

/// The `p_i · α_ij` products of a clearing program under `bounds`.
pub fn opf_products(model: &OpfModel, bounds: &McCormickBounds) -> Vec<Product> {
    let prog = &model.program;
    let lay = &model.layout;
    let mut out = Vec::new();
    for (i, a) in lay.alpha.iter().enumerate() {
        for (j, &aj) in a.iter().enumerate() {
            let (lo, hi) = if lay.p[i].0 <= aj.0 { (lay.p[i].0, aj.0) } else { (aj.0, lay.p[i].0) };
            let coef = prog.quadratic_terms().get(&(lo, hi)).copied().unwrap_or(0.0);
            if coef == 0.0 {
                continue;
            }
            out.push(Product {
                x: lay.p[i],
                y: aj,
                coef,
                x_lb: bounds.p_lb[i],
                x_ub: bounds.p_ub[i],
                y_lb: bounds.a_lb[i][j],
                y_ub: bounds.a_ub[i][j],
            });
        }
    }
    out
}

/// Exact expected cost of a dispatch.
pub fn true_objective(case: &GridCase, unc: &UncertaintyModel, d: &DispatchResult) -> Result<f64, MarketError> {
    let mean: Vec<f64> = unc.mean_vector.iter().copied().collect();
    let mut total = 0.0;
    for (i, g) in case.generators.iter().enumerate() {
        total += market::expected_cost(g, d.p[i], &d.alpha[i], &mean, &unc.covariance)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Relaxed objective `Ĉ(x̂)`.
    pub lower: f64,
    /// True objective `C(x̂)`.
    pub upper: f64,
    pub gap_percent: f64,
    /// Best true objective so far.
    pub best_upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvexStatus {
    Converged,
    MaxIter,
    /// A later relaxation failed; the result is the best incumbent so far.
    SolverFailure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvexifiedResult {
    pub incumbent: DispatchResult,
    /// Relaxed objective of the incumbent's own relaxation.
    pub lower: f64,
    pub upper: f64,
    /// Relaxed objective on the physical box: a lower bound on the optimum.
    /// Later relaxations live on smaller boxes and bound only their box.
    pub global_lower: f64,
    pub gap_percent: f64,
    pub trace: Vec<TraceRow>,
    pub status: ConvexStatus,
    pub bounds: McCormickBounds,
}

/// `100 (C − Ĉ) / |Ĉ|`, which is `100 (C/Ĉ − 1)` for a positive relaxed
/// objective. Infinite when `Ĉ = 0 < C`.
pub fn gap_percent(lower: f64, upper: f64) -> f64 {
    if lower == upper {
        return 0.0;
    }
    100.0 * (upper - lower) / lower.abs()
}

/// Solves relaxations on shrinking boxes until the gap of an iterate drops to
/// `gap_tol` percent or `max_iter` relaxations have been solved.
pub fn solve_sequential(
    policy: BalancingPolicy,
    case: &GridCase,
    unc: &UncertaintyModel,
    shrink: f64,
    gap_tol: f64,
    max_iter: usize,
    opts: &SolveOptions,
) -> Result<ConvexifiedResult, McCormickError> {
    if !policy.is_asymmetric() {
        return Err(McCormickError::Symmetric(policy));
    }
    if !(shrink > 0.0 && shrink < 1.0) {
        return Err(McCormickError::Parameter(format!("shrink {shrink} not in (0, 1)")));
    }
    if !(gap_tol > 0.0) || max_iter == 0 {
        return Err(McCormickError::Parameter("gap_tol must be positive and max_iter at least 1".into()));
    }
    let model = market::build_opf(policy, case, unc)?;
    let relax_opts = SolveOptions { tol: opts.tol.max(RELAX_TOL), ..*opts };
    let mut bounds = McCormickBounds::initial(case, unc, shrink);
    let mut trace = Vec::new();
    let mut best: Option<(DispatchResult, f64, f64, McCormickBounds)> = None;
    let mut status = ConvexStatus::MaxIter;
    for it in 0..max_iter {
        let env = envelope_with(&model.program, &opf_products(&model, &bounds), EnvelopeRows::ObjectiveSide)?;
        let sol = conic::solve(&env, &relax_opts)?;
        let decoded = if sol.status == SolveStatus::Optimal {
            market::decode(&model, case, unc, &sol)
        } else {
            Err(MarketError::NotOptimal(sol.status))
        };
        let d = match decoded {
            Ok(d) => d,
            Err(e) => {
                if best.is_none() {
                    return match e {
                        MarketError::NotOptimal(s) => Err(McCormickError::FirstSolve(s)),
                        e => Err(e.into()),
                    };
                }
                log::warn!("relaxation {it} rejected: {e}");
                status = ConvexStatus::SolverFailure;
                break;
            }
        };
        let upper = true_objective(case, unc, &d)?;
        let lower = sol.objective;
        let gap = gap_percent(lower, upper);
        let better = best.as_ref().map_or(true, |b| upper < b.2);
        if better {
            best = Some((d.clone(), lower, upper, bounds.clone()));
        }
        let best_upper = best.as_ref().map(|b| b.2).unwrap_or(upper);
        log::debug!("iteration {it}: lower {lower} upper {upper} gap {gap}%");
        trace.push(TraceRow {
            iteration: it,
            lower,
            upper,
            gap_percent: gap,
            best_upper,
        });
        if gap <= gap_tol {
            status = ConvexStatus::Converged;
            break;
        }
        bounds = bounds.tighten(&d);
    }
    let (incumbent, lower, upper, bounds) = best.expect("at least one relaxation solved");
    Ok(ConvexifiedResult {
        gap_percent: gap_percent(lower, upper),
        global_lower: trace[0].lower,
        incumbent,
        lower,
        upper,
        trace,
        status,
        bounds,
    })
}

/// Writes the trace as CSV with header `iteration,lower,upper,gap_percent,best_upper`.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for row in trace {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}
