//! Chance-constrained DC-OPF clearing programs.
//!
//! Every provider `i` (a generator with `p_max > p_min`) holds one
//! participation factor per balancing column. Its real-time output is
//! `p_i − Ω·A_i`, so the expected cost is
//!
//! ```text
//! C_i = c2 p² + c1 p + c0 − (2 c2 p + c1)(M·A_i) + c2 [(M·A_i)² + S_i²],   S_i² = A_iᵀ Σ A_i
//! ```
//!
//! and the capacity chance constraints in Chebyshev form read
//!
//! ```text
//!  p_i − M·A_i + z_i S_i ≤ P̄_i
//! −p_i + M·A_i + z_i S_i ≤ −P_i
//! ```
//!
//! Each capacity row is a cone row `P̄_i − p_i + M·A_i ≥ ‖z_i Fᵀ A_i‖`
//! (`Σ = F Fᵀ`), so its cone multiplier is the row multiplier `δ̄_i` (or
//! `δ_i`) directly, and the objective carries `c2 A_iᵀ Σ A_i` as an exact
//! quadratic. The system-wide symmetric policy uses the linear rows
//! `p_i ± z_i s α_i` instead.
//!
//! The expected cost equals `c2 (p − M·A)² + c1 (p − M·A) + c0 + c2 S²`, which
//! is jointly convex, so the exact program is solved directly. The envelope
//! relaxation of the `p·α` products lives in [`crate::mccormick`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, SolveOptions, SolveStatus, Solution, VarId};
use crate::grid::{Generator, GridCase};
use crate::uncertainty::{Column, UncertaintyModel};

pub use crate::uncertainty::BalancingPolicy;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("uncertainty model was assembled for {found}, clearing requested {expected}")]
    PolicyMismatch {
        expected: BalancingPolicy,
        found: BalancingPolicy,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no generator can provide balancing reserve")]
    NoProviders,
    #[error("solver returned status {0}")]
    NotOptimal(SolveStatus),
    #[error("decoded dispatch violates an invariant: {0}")]
    Invariant(String),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

pub fn balance_row(bus: i64) -> String {
    format!("balance@{bus}")
}

pub fn capmax_row(gen_bus: i64) -> String {
    format!("capmax@{gen_bus}")
}

pub fn capmin_row(gen_bus: i64) -> String {
    format!("capmin@{gen_bus}")
}

pub fn flowdef_row(case: &GridCase, line: usize) -> String {
    format!("flowdef@{}", case.line_name(line))
}

pub fn flowmax_row(case: &GridCase, line: usize) -> String {
    format!("flowmax@{}", case.line_name(line))
}

pub fn flowmin_row(case: &GridCase, line: usize) -> String {
    format!("flowmin@{}", case.line_name(line))
}

pub const REFERENCE_ROW: &str = "refangle";

/// Variable handles of a clearing program.
#[derive(Debug, Clone)]
pub struct OpfLayout {
    pub p: Vec<VarId>,
    pub theta: Vec<VarId>,
    pub flow: Vec<VarId>,
    /// Per generator, one factor per column; empty for non-providers.
    pub alpha: Vec<Vec<VarId>>,
    pub providers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct OpfModel {
    pub policy: BalancingPolicy,
    pub program: ConicProgram,
    pub layout: OpfLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub policy: BalancingPolicy,
    pub columns: Vec<Column>,
    pub p: Vec<f64>,
    /// Participation matrix, one row per generator.
    pub alpha: Vec<Vec<f64>>,
    pub flows: Vec<f64>,
    pub theta: Vec<f64>,
    /// `S_i = sqrt(A_iᵀ Σ A_i)`.
    pub s: Vec<f64>,
    pub gen_cost: Vec<f64>,
    pub expected_cost: f64,
}

/// Expected cost of one generator under affine recourse `p − Ω·A`.
pub fn expected_cost(
    gen: &Generator,
    p: f64,
    a: &[f64],
    mean: &[f64],
    cov: &nalgebra::DMatrix<f64>,
) -> Result<f64, MarketError> {
    let k = a.len();
    if mean.len() != k || cov.nrows() != k || cov.ncols() != k {
        return Err(MarketError::Dimension(format!(
            "A has {} entries, M has {}, Σ is {}x{}",
            k,
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let m: f64 = mean.iter().zip(a).map(|(x, y)| x * y).sum();
    let mut s2 = 0.0;
    for r in 0..k {
        for c in 0..k {
            s2 += a[r] * cov[(r, c)] * a[c];
        }
    }
    Ok(gen.c2 * p * p + gen.c1 * p + gen.c0 - (2.0 * gen.c2 * p + gen.c1) * m + gen.c2 * (m * m + s2))
}

/// Builds the exact clearing program for `policy`.
pub fn build_opf(
    policy: BalancingPolicy,
    case: &GridCase,
    unc: &UncertaintyModel,
) -> Result<OpfModel, MarketError> {
    if unc.policy != policy {
        return Err(MarketError::PolicyMismatch {
            expected: policy,
            found: unc.policy,
        });
    }
    if unc.num_res() != case.res_units.len() && policy.is_stochastic() {
        return Err(MarketError::Dimension(format!(
            "uncertainty model has {} RES units, case has {}",
            unc.num_res(),
            case.res_units.len()
        )));
    }
    let mut prog = ConicProgram::new();
    let k = unc.num_columns();
    let providers = case.providers();
    if k > 0 && providers.is_empty() {
        return Err(MarketError::NoProviders);
    }
    let linear_sw = policy == BalancingPolicy::SwSb;

    let mut p = Vec::with_capacity(case.generators.len());
    let mut alpha = Vec::with_capacity(case.generators.len());
    for g in &case.generators {
        p.push(prog.free_var(format!("p@{}", g.bus))?);
        let mut a = Vec::new();
        if g.is_provider() {
            for col in &unc.columns {
                a.push(prog.add_var(format!("alpha@{},{}", g.bus, col.label()), 0.0, f64::INFINITY)?);
            }
        }
        alpha.push(a);
    }
    let theta: Vec<VarId> = case
        .buses
        .iter()
        .map(|b| prog.free_var(format!("theta@{}", b.id)))
        .collect::<Result<_, _>>()?;
    let flow: Vec<VarId> = (0..case.lines.len())
        .map(|l| prog.free_var(format!("f@{}", case.line_name(l))))
        .collect::<Result<_, _>>()?;

    // Objective.
    let mean = &unc.mean_vector;
    for (i, g) in case.generators.iter().enumerate() {
        prog.add_quad(p[i], p[i], g.c2);
        prog.add_linear(p[i], g.c1);
        prog.add_constant(g.c0);
        let a = &alpha[i];
        if a.is_empty() {
            continue;
        }
        for j in 0..k {
            if mean[j] != 0.0 {
                prog.add_quad(p[i], a[j], -2.0 * g.c2 * mean[j]);
                prog.add_linear(a[j], -g.c1 * mean[j]);
                for l in 0..k {
                    prog.add_quad(a[j], a[l], g.c2 * mean[j] * mean[l]);
                }
            }
        }
        for j in 0..k {
            for l in 0..k {
                prog.add_quad(a[j], a[l], g.c2 * unc.covariance[(j, l)]);
            }
        }
    }

    add_network(&mut prog, case, &p, &theta, &flow, |b| {
        let bus = &case.buses[b];
        let w = case.res_at(bus.id).map(|u| case.forecast(u)).unwrap_or(0.0);
        bus.demand - w
    })?;

    // Adequacy.
    for (j, col) in unc.columns.iter().enumerate() {
        let terms: Vec<(VarId, f64)> = providers.iter().map(|&i| (alpha[i][j], 1.0)).collect();
        prog.add_eq(col.row_name(), &terms, 1.0)?;
    }

    // Capacity.
    for (i, g) in case.generators.iter().enumerate() {
        add_capacity_rows(&mut prog, g, unc, p[i], &alpha[i], linear_sw, "")?;
    }

    Ok(OpfModel {
        policy,
        program: prog,
        layout: OpfLayout {
            p,
            theta,
            flow,
            alpha,
            providers,
        },
    })
}

/// Chance-constrained capacity rows of one generator.
///
/// Without participation they are plain bounds `p ≤ P̄`, `−p ≤ −P`. The
/// system-wide symmetric policy uses `±p + z s α ≤ …`; all other policies use
/// cone rows `P̄ − p + M·A ≥ ‖z Fᵀ A‖` and `p − M·A − P ≥ ‖z Fᵀ A‖`.
pub(crate) fn add_capacity_rows(
    prog: &mut ConicProgram,
    g: &Generator,
    unc: &UncertaintyModel,
    p: VarId,
    alpha: &[VarId],
    linear_sw: bool,
    suffix: &str,
) -> Result<(), ConicError> {
    let up_name = format!("{}{}", capmax_row(g.bus), suffix);
    let dn_name = format!("{}{}", capmin_row(g.bus), suffix);
    let z = unc.z(g.bus);
    let f = &unc.factor;
    if alpha.is_empty() || (!linear_sw && f.ncols() == 0) {
        let mut up = vec![(p, 1.0)];
        let mut dn = vec![(p, -1.0)];
        for (j, &a) in alpha.iter().enumerate() {
            up.push((a, -unc.mean_vector[j]));
            dn.push((a, unc.mean_vector[j]));
        }
        prog.add_le(up_name, &up, g.p_max)?;
        prog.add_le(dn_name, &dn, -g.p_min)?;
        return Ok(());
    }
    if linear_sw {
        let zs = z * unc.total_std;
        prog.add_le(up_name, &[(p, 1.0), (alpha[0], zs)], g.p_max)?;
        prog.add_le(dn_name, &[(p, -1.0), (alpha[0], zs)], -g.p_min)?;
        return Ok(());
    }
    let k = alpha.len();
    let comps: Vec<(Vec<(VarId, f64)>, f64)> = (0..f.ncols())
        .map(|r| ((0..k).map(|j| (alpha[j], z * f[(j, r)])).collect(), 0.0))
        .collect();
    let mut up_head = vec![(p, -1.0)];
    let mut dn_head = vec![(p, 1.0)];
    for (j, &a) in alpha.iter().enumerate() {
        up_head.push((a, unc.mean_vector[j]));
        dn_head.push((a, -unc.mean_vector[j]));
    }
    prog.add_soc_affine(up_name, &up_head, g.p_max, comps.clone())?;
    prog.add_soc_affine(dn_name, &dn_head, -g.p_min, comps)?;
    Ok(())
}

/// Nodal balance, flow definition, flow limits and the reference angle.
/// `net_load(b)` is the right-hand side `D − w` at bus position `b`.
pub(crate) fn add_network(
    prog: &mut ConicProgram,
    case: &GridCase,
    p: &[VarId],
    theta: &[VarId],
    flow: &[VarId],
    net_load: impl Fn(usize) -> f64,
) -> Result<(), ConicError> {
    add_network_state(prog, case, p, theta, flow, net_load, &|_| true, "")
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn add_network_state(
    prog: &mut ConicProgram,
    case: &GridCase,
    p: &[VarId],
    theta: &[VarId],
    flow: &[VarId],
    net_load: impl Fn(usize) -> f64,
    line_active: &dyn Fn(usize) -> bool,
    suffix: &str,
) -> Result<(), ConicError> {
    let nb = case.num_buses();
    let mut rows: Vec<Vec<(VarId, f64)>> = vec![Vec::new(); nb];
    for (i, g) in case.generators.iter().enumerate() {
        rows[case.bus_index(g.bus).expect("validated")].push((p[i], 1.0));
    }
    for (l, line) in case.lines.iter().enumerate() {
        let a = case.bus_index(line.from).expect("validated");
        let b = case.bus_index(line.to).expect("validated");
        rows[a].push((flow[l], -1.0));
        rows[b].push((flow[l], 1.0));
    }
    for (b, terms) in rows.iter().enumerate() {
        prog.add_eq(format!("{}{}", balance_row(case.buses[b].id), suffix), terms, net_load(b))?;
    }
    for (l, line) in case.lines.iter().enumerate() {
        let a = case.bus_index(line.from).expect("validated");
        let b = case.bus_index(line.to).expect("validated");
        let name = case.line_name(l);
        if line_active(l) {
            prog.add_eq(
                format!("flowdef@{name}{suffix}"),
                &[(flow[l], 1.0), (theta[a], -1.0 / line.x), (theta[b], 1.0 / line.x)],
                0.0,
            )?;
            prog.add_le(format!("flowmax@{name}{suffix}"), &[(flow[l], 1.0)], line.f_max)?;
            prog.add_le(format!("flowmin@{name}{suffix}"), &[(flow[l], -1.0)], line.f_max)?;
        } else {
            prog.add_eq(format!("flowdef@{name}{suffix}"), &[(flow[l], 1.0)], 0.0)?;
        }
    }
    prog.add_eq(
        format!("{REFERENCE_ROW}{suffix}"),
        &[(theta[case.reference_index()], 1.0)],
        0.0,
    )?;
    Ok(())
}

/// Decodes an optimal solution and checks the dispatch invariants.
pub fn decode(
    model: &OpfModel,
    case: &GridCase,
    unc: &UncertaintyModel,
    solution: &Solution,
) -> Result<DispatchResult, MarketError> {
    if solution.status != SolveStatus::Optimal {
        return Err(MarketError::NotOptimal(solution.status));
    }
    let lay = &model.layout;
    let k = unc.num_columns();
    let x = &solution.x;
    let p: Vec<f64> = lay.p.iter().map(|v| x[v.0]).collect();
    let alpha: Vec<Vec<f64>> = lay
        .alpha
        .iter()
        .map(|a| {
            if a.is_empty() {
                vec![0.0; k]
            } else {
                a.iter().map(|v| x[v.0]).collect()
            }
        })
        .collect();
    let d = dispatch_from(model.policy, case, unc, p, alpha, lay.flow.iter().map(|v| x[v.0]).collect(), lay.theta.iter().map(|v| x[v.0]).collect())?;
    for (i, g) in case.generators.iter().enumerate() {
        let m = unc.mean_of(&d.alpha[i]);
        let zs = unc.z(g.bus) * d.s[i];
        let over = (d.p[i] - m + zs - g.p_max).max(g.p_min - d.p[i] + m + zs);
        if over > CAPACITY_TOL * g.p_max.abs().max(1.0) {
            return Err(MarketError::Invariant(format!(
                "generator {}: capacity row violated by {} with recomputed S = {}",
                g.bus, over, d.s[i]
            )));
        }
    }
    let viol = d.invariant_violations(case);
    if let Some(v) = viol.first() {
        return Err(MarketError::Invariant(v.clone()));
    }
    Ok(d)
}

/// Allowed violation of a capacity row evaluated with the recomputed `S_i`,
/// relative to `max(1, P̄_i)`.
pub const CAPACITY_TOL: f64 = 1e-7;

/// Builds a dispatch record from raw decision values.
pub fn dispatch_from(
    policy: BalancingPolicy,
    case: &GridCase,
    unc: &UncertaintyModel,
    p: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    flows: Vec<f64>,
    theta: Vec<f64>,
) -> Result<DispatchResult, MarketError> {
    let mean: Vec<f64> = unc.mean_vector.iter().copied().collect();
    let mut s = Vec::with_capacity(p.len());
    let mut gen_cost = Vec::with_capacity(p.len());
    for (i, g) in case.generators.iter().enumerate() {
        s.push(unc.std_of(&alpha[i]));
        gen_cost.push(expected_cost(g, p[i], &alpha[i], &mean, &unc.covariance)?);
    }
    let expected_cost = gen_cost.iter().sum();
    Ok(DispatchResult {
        policy,
        columns: unc.columns.clone(),
        p,
        alpha,
        flows,
        theta,
        s,
        gen_cost,
        expected_cost,
    })
}

impl DispatchResult {
    /// Human-readable list of violated dispatch invariants.
    pub fn invariant_violations(&self, case: &GridCase) -> Vec<String> {
        let mut out = Vec::new();
        let tol = 1e-6;
        for (i, row) in self.alpha.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                if !(-tol..=1.0 + tol).contains(&a) {
                    out.push(format!(
                        "alpha[{}][{}] = {} outside [0,1]",
                        case.generators[i].bus,
                        self.columns[j].label(),
                        a
                    ));
                }
            }
        }
        for (j, col) in self.columns.iter().enumerate() {
            let sum: f64 = self.alpha.iter().map(|r| r[j]).sum();
            if (sum - 1.0).abs() > tol {
                out.push(format!("column {} sums to {}", col.label(), sum));
            }
        }
        let max_d = case.buses.iter().map(|b| b.demand).fold(1.0, f64::max);
        let mut inj = vec![0.0; case.num_buses()];
        for (i, g) in case.generators.iter().enumerate() {
            inj[case.bus_index(g.bus).unwrap()] += self.p[i];
        }
        for (u, r) in case.res_units.iter().enumerate() {
            inj[case.bus_index(r.bus).unwrap()] += case.forecast(u);
        }
        for (l, line) in case.lines.iter().enumerate() {
            inj[case.bus_index(line.from).unwrap()] -= self.flows[l];
            inj[case.bus_index(line.to).unwrap()] += self.flows[l];
            if self.flows[l].abs() > line.f_max + tol {
                out.push(format!("line {} flow {} exceeds {}", case.line_name(l), self.flows[l], line.f_max));
            }
        }
        for (b, bus) in case.buses.iter().enumerate() {
            if (inj[b] - bus.demand).abs() > tol * max_d {
                out.push(format!("bus {} balance residual {}", bus.id, inj[b] - bus.demand));
            }
        }
        out
    }

    /// `M · A_i` for every generator.
    pub fn mean_shift(&self, unc: &UncertaintyModel) -> Vec<f64> {
        self.alpha.iter().map(|a| unc.mean_of(a)).collect()
    }
}

/// A solved clearing.
#[derive(Debug, Clone)]
pub struct Clearing {
    pub model: OpfModel,
    pub solution: Solution,
    pub dispatch: DispatchResult,
}

pub fn clear(
    policy: BalancingPolicy,
    case: &GridCase,
    unc: &UncertaintyModel,
    opts: &SolveOptions,
) -> Result<Clearing, MarketError> {
    let model = build_opf(policy, case, unc)?;
    let solution = conic::solve(&model.program, opts)?;
    let dispatch = decode(&model, case, unc, &solution)?;
    Ok(Clearing {
        model,
        solution,
        dispatch,
    })
}
