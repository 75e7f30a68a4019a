//! Solver contract and the Clarabel interior-point backend.

use std::collections::BTreeMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::{ConicError, ConicProgram, RowKind, Solution, SolveOptions, SolveStatus};

/// Any backend returning duals under the crate's sign convention.
pub trait ConicSolver {
    fn solve(&self, program: &ConicProgram, opts: &SolveOptions) -> Result<Solution, ConicError>;
}

/// Primal-dual interior point with Nesterov-Todd scaling and sparse LDLᵀ
/// factorisation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClarabelBackend;

/// Solves with the default backend.
pub fn solve(program: &ConicProgram, opts: &SolveOptions) -> Result<Solution, ConicError> {
    ClarabelBackend.solve(program, opts)
}

enum BoundRow {
    Lower(usize),
    Upper(usize),
}

impl ConicSolver for ClarabelBackend {
    fn solve(&self, program: &ConicProgram, opts: &SolveOptions) -> Result<Solution, ConicError> {
        let n = program.num_vars();
        let vars = program.variables();

        // Quadratic part, upper triangle of P with ½xᵀPx = Σ q_ab x_a x_b.
        let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
        for (&(a, b), &c) in program.quadratic_terms() {
            pi.push(a);
            pj.push(b);
            pv.push(if a == b { 2.0 * c } else { c });
        }
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
        let q = program.linear_terms().to_vec();

        let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0usize;

        // Zero cone: equality rows, then fixed variables.
        let fixed: Vec<usize> = (0..n).filter(|&k| vars[k].lower == vars[k].upper).collect();
        for r in program.eq_rows() {
            for &(v, c) in &r.terms {
                ai.push(row);
                aj.push(v.0);
                av.push(c);
            }
            b.push(r.rhs);
            row += 1;
        }
        for &k in &fixed {
            ai.push(row);
            aj.push(k);
            av.push(1.0);
            b.push(vars[k].lower);
            row += 1;
        }
        let n_zero = row;
        if n_zero > 0 {
            cones.push(SupportedConeT::ZeroConeT(n_zero));
        }

        // Nonnegative cone: inequality rows, then finite bounds.
        for r in program.le_rows() {
            for &(v, c) in &r.terms {
                ai.push(row);
                aj.push(v.0);
                av.push(c);
            }
            b.push(r.rhs);
            row += 1;
        }
        let mut bound_rows = Vec::new();
        for (k, var) in vars.iter().enumerate() {
            if var.lower == var.upper {
                continue;
            }
            if var.lower.is_finite() {
                ai.push(row);
                aj.push(k);
                av.push(-1.0);
                b.push(-var.lower);
                bound_rows.push(BoundRow::Lower(k));
                row += 1;
            }
            if var.upper.is_finite() {
                ai.push(row);
                aj.push(k);
                av.push(1.0);
                b.push(var.upper);
                bound_rows.push(BoundRow::Upper(k));
                row += 1;
            }
        }
        let n_nonneg = row - n_zero;
        if n_nonneg > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
        }

        // Second-order cones: (hᵀx + h₀, Wx + d).
        let soc_start = row;
        for s in program.soc_rows() {
            for &(v, c) in &s.head {
                ai.push(row);
                aj.push(v.0);
                av.push(-c);
            }
            b.push(s.head_offset);
            row += 1;
            for (terms, d) in &s.components {
                for &(v, c) in terms {
                    ai.push(row);
                    aj.push(v.0);
                    av.push(-c);
                }
                b.push(*d);
                row += 1;
            }
            cones.push(SupportedConeT::SecondOrderConeT(1 + s.components.len()));
        }
        let m = row;
        let a = CscMatrix::new_from_triplets(m, n, ai, aj, av);

        let mut attempt = 0;
        let (solver, status) = loop {
            let settings = settings(opts, attempt)?;
            let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
                .map_err(|e| ConicError::Setup(format!("{e:?}")))?;
            solver.solve();
            let status = classify(&solver, opts);
            if status.is_some() || attempt + 1 == RETRIES.len() {
                break (solver, status.unwrap_or(SolveStatus::MaxIter));
            }
            log::debug!("retrying with settings {}", attempt + 1);
            attempt += 1;
        };
        let sol = &solver.solution;

        let z = &sol.z;
        let x = sol.x.clone();
        let eq_duals: Vec<f64> = (0..program.eq_rows().len()).map(|k| -z[k]).collect();
        let mut lower_bound_duals = vec![0.0; n];
        let mut upper_bound_duals = vec![0.0; n];
        for (j, &k) in fixed.iter().enumerate() {
            let zk = z[program.eq_rows().len() + j];
            lower_bound_duals[k] = (-zk).max(0.0);
            upper_bound_duals[k] = zk.max(0.0);
        }
        let le_duals: Vec<f64> = (0..program.le_rows().len()).map(|k| z[n_zero + k]).collect();
        for (j, br) in bound_rows.iter().enumerate() {
            let zk = z[n_zero + program.le_rows().len() + j];
            match *br {
                BoundRow::Lower(k) => lower_bound_duals[k] = zk,
                BoundRow::Upper(k) => upper_bound_duals[k] = zk,
            }
        }
        let mut soc_duals = Vec::with_capacity(program.soc_rows().len());
        let mut at = soc_start;
        for s in program.soc_rows() {
            let len = 1 + s.components.len();
            soc_duals.push(z[at..at + len].to_vec());
            at += len;
        }

        let constant = program.constant();
        let objective = sol.obj_val + constant;
        let dual_objective = sol.obj_val_dual + constant;
        let rel_gap = if status == SolveStatus::Optimal {
            (objective - dual_objective).abs() / objective.abs().max(1.0)
        } else {
            f64::NAN
        };

        let primal: BTreeMap<String, f64> = vars
            .iter()
            .zip(&x)
            .map(|(v, &val)| (v.name.clone(), val))
            .collect();
        let mut duals = BTreeMap::new();
        for (name, h) in program.registry() {
            match h.kind {
                RowKind::Eq => {
                    duals.insert(name.clone(), eq_duals[h.index]);
                }
                RowKind::Le => {
                    duals.insert(name.clone(), le_duals[h.index]);
                }
                RowKind::Soc => {
                    duals.insert(name.clone(), soc_duals[h.index][0]);
                }
            }
        }

        Ok(Solution {
            status,
            x,
            objective,
            dual_objective,
            rel_gap,
            iterations: sol.iterations,
            eq_duals,
            le_duals,
            soc_duals,
            lower_bound_duals,
            upper_bound_duals,
            primal,
            duals,
        })
    }
}

/// Fallback settings for solves that stall: `(max_step_fraction,
/// feasibility target as a multiple of tol, static regularization)`.
const RETRIES: [(f64, f64, f64); 4] = [(0.99, 1e-3, 1e-8), (0.9, 1e-3, 1e-8), (0.99, 1e-2, 1e-8), (0.99, 1e-3, 1e-7)];

// Aim three orders below the requested tolerance; a solve that stalls still
// counts once it is one order below.
fn settings(opts: &SolveOptions, attempt: usize) -> Result<DefaultSettings<f64>, ConicError> {
    let (step, feas, reg) = RETRIES[attempt];
    let inner = opts.tol * 1e-3;
    let reduced = opts.tol * 1e-1;
    DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(opts.max_iter)
        .tol_gap_abs(inner)
        .tol_gap_rel(inner)
        .tol_feas(opts.tol * feas)
        .reduced_tol_gap_abs(reduced)
        .reduced_tol_gap_rel(reduced)
        .reduced_tol_feas(reduced)
        .max_step_fraction(step)
        .static_regularization_constant(reg)
        .presolve_enable(false)
        .build()
        .map_err(|e| ConicError::Setup(format!("{e:?}")))
}

/// Decisive outcome of a solve, `None` for a stall worth retrying.
fn classify(solver: &DefaultSolver<f64>, opts: &SolveOptions) -> Option<SolveStatus> {
    let sol = &solver.solution;
    let info = &solver.info;
    // A stalled solve whose residuals and gap already meet `tol` is accepted.
    let stalled_ok = sol.r_prim <= opts.tol
        && sol.r_dual <= opts.tol
        && (info.gap_abs <= opts.tol || info.gap_rel <= opts.tol);
    log::debug!(
        "clarabel {:?} after {} iterations: r_prim {:e} r_dual {:e} gap_abs {:e} gap_rel {:e}",
        sol.status,
        sol.iterations,
        sol.r_prim,
        sol.r_dual,
        info.gap_abs,
        info.gap_rel
    );
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Some(SolveStatus::Optimal),
        SolverStatus::InsufficientProgress | SolverStatus::MaxIterations | SolverStatus::NumericalError
            if stalled_ok =>
        {
            Some(SolveStatus::Optimal)
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Some(SolveStatus::Infeasible),
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Some(SolveStatus::Unbounded),
        _ => None,
    }
}

/// Central finite difference of the optimal value with respect to the
/// right-hand side of a linear row.
///
/// For an equality row this approximates the row dual; for an inequality or
/// cone row (perturbing the head offset) it approximates minus the
/// multiplier.
pub fn shadow_price_fd(
    program: &ConicProgram,
    row: &str,
    h: f64,
    opts: &SolveOptions,
) -> Result<f64, ConicError> {
    let b = program.rhs(row)?;
    let mut values = [0.0; 2];
    for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
        let mut p = program.clone();
        p.set_rhs(row, b + sign * h)?;
        let s = solve(&p, opts)?;
        if s.status != SolveStatus::Optimal {
            return Err(ConicError::FdResolve {
                row: row.to_string(),
                status: s.status,
            });
        }
        values[k] = s.objective;
    }
    Ok((values[0] - values[1]) / (2.0 * h))
}
