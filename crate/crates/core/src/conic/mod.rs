//! Convex programs with a named-row registry.
//!
//! A [`ConicProgram`] holds
//!
//! * variables with optional bounds,
//! * a convex quadratic objective `Σ q_ab x_a x_b + cᵀx + k`,
//! * equality rows `aᵀx = b`, inequality rows `aᵀx ≤ b`,
//! * second-order cone rows `hᵀx + h₀ ≥ ‖Wx + d‖`.
//!
//! Every row carries a unique semantic name (`balance@7`, `capmax@12`, …) so
//! prices can be read straight from [`Solution::duals`].
//!
//! Dual sign convention: the dual of an equality row is `∂f*/∂b` (the shadow
//! price; the dual of a nodal balance row is the LMP), the dual of an
//! inequality row is the non-negative multiplier `−∂f*/∂b`.

mod dump;
mod solve;

use std::collections::BTreeMap;

use thiserror::Error;

pub use dump::to_text;
pub use solve::{shadow_price_fd, solve, ClarabelBackend, ConicSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Eq,
    Le,
    Soc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowHandle {
    pub kind: RowKind,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub name: String,
    pub terms: Vec<(VarId, f64)>,
    pub rhs: f64,
}

/// `hᵀx + h₀ ≥ ‖(w_k · x + d_k)_k‖`. The head offset `h₀` plays the role of
/// the right-hand side for [`ConicProgram::set_rhs`].
#[derive(Debug, Clone, PartialEq)]
pub struct SocRow {
    pub name: String,
    pub head: Vec<(VarId, f64)>,
    pub head_offset: f64,
    pub components: Vec<(Vec<(VarId, f64)>, f64)>,
}

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("duplicate name '{0}'")]
    DuplicateName(String),
    #[error("unknown row '{0}'")]
    UnknownRow(String),
    #[error("unknown variable index {0}")]
    UnknownVar(usize),
    #[error("invalid bounds for '{name}': [{lower}, {upper}]")]
    Bounds { name: String, lower: f64, upper: f64 },
    #[error("non-finite coefficient in '{0}'")]
    NonFinite(String),
    #[error("solver setup failed: {0}")]
    Setup(String),
    #[error("re-solve at perturbed right-hand side of '{row}' ended with status {status}")]
    FdResolve { row: String, status: SolveStatus },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::MaxIter => "max_iter",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    vars: Vec<Variable>,
    var_index: BTreeMap<String, VarId>,
    quad: BTreeMap<(usize, usize), f64>,
    lin: Vec<f64>,
    constant: f64,
    eqs: Vec<LinearRow>,
    les: Vec<LinearRow>,
    socs: Vec<SocRow>,
    registry: BTreeMap<String, RowHandle>,
}

fn merge_terms(name: &str, terms: &[(VarId, f64)], nvars: usize) -> Result<Vec<(VarId, f64)>, ConicError> {
    let mut acc: BTreeMap<VarId, f64> = BTreeMap::new();
    for &(v, c) in terms {
        if v.0 >= nvars {
            return Err(ConicError::UnknownVar(v.0));
        }
        if !c.is_finite() {
            return Err(ConicError::NonFinite(name.to_string()));
        }
        *acc.entry(v).or_insert(0.0) += c;
    }
    Ok(acc.into_iter().filter(|&(_, c)| c != 0.0).collect())
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> Result<VarId, ConicError> {
        let name = name.into();
        if lower > upper || lower.is_nan() || upper.is_nan() || lower == f64::INFINITY || upper == f64::NEG_INFINITY {
            return Err(ConicError::Bounds { name, lower, upper });
        }
        if self.var_index.contains_key(&name) {
            return Err(ConicError::DuplicateName(name));
        }
        let id = VarId(self.vars.len());
        self.var_index.insert(name.clone(), id);
        self.vars.push(Variable { name, lower, upper });
        self.lin.push(0.0);
        Ok(id)
    }

    pub fn free_var(&mut self, name: impl Into<String>) -> Result<VarId, ConicError> {
        self.add_var(name, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn set_bounds(&mut self, v: VarId, lower: f64, upper: f64) -> Result<(), ConicError> {
        let var = self.vars.get_mut(v.0).ok_or(ConicError::UnknownVar(v.0))?;
        if lower > upper || lower.is_nan() || upper.is_nan() {
            return Err(ConicError::Bounds {
                name: var.name.clone(),
                lower,
                upper,
            });
        }
        var.lower = lower;
        var.upper = upper;
        Ok(())
    }

    fn register(&mut self, name: &str, handle: RowHandle) -> Result<(), ConicError> {
        if self.registry.contains_key(name) {
            return Err(ConicError::DuplicateName(name.to_string()));
        }
        self.registry.insert(name.to_string(), handle);
        Ok(())
    }

    pub fn add_eq(&mut self, name: impl Into<String>, terms: &[(VarId, f64)], rhs: f64) -> Result<RowHandle, ConicError> {
        let name = name.into();
        let terms = merge_terms(&name, terms, self.vars.len())?;
        let h = RowHandle {
            kind: RowKind::Eq,
            index: self.eqs.len(),
        };
        self.register(&name, h)?;
        self.eqs.push(LinearRow { name, terms, rhs });
        Ok(h)
    }

    pub fn add_le(&mut self, name: impl Into<String>, terms: &[(VarId, f64)], rhs: f64) -> Result<RowHandle, ConicError> {
        let name = name.into();
        let terms = merge_terms(&name, terms, self.vars.len())?;
        let h = RowHandle {
            kind: RowKind::Le,
            index: self.les.len(),
        };
        self.register(&name, h)?;
        self.les.push(LinearRow { name, terms, rhs });
        Ok(h)
    }

    /// Adds `t ≥ ‖(w_k · x + d_k)_k‖`.
    pub fn add_soc(
        &mut self,
        name: impl Into<String>,
        t: VarId,
        components: Vec<(Vec<(VarId, f64)>, f64)>,
    ) -> Result<RowHandle, ConicError> {
        self.add_soc_affine(name, &[(t, 1.0)], 0.0, components)
    }

    /// Adds `hᵀx + h₀ ≥ ‖(w_k · x + d_k)_k‖`.
    pub fn add_soc_affine(
        &mut self,
        name: impl Into<String>,
        head: &[(VarId, f64)],
        head_offset: f64,
        components: Vec<(Vec<(VarId, f64)>, f64)>,
    ) -> Result<RowHandle, ConicError> {
        let name = name.into();
        let head = merge_terms(&name, head, self.vars.len())?;
        let mut comps = Vec::with_capacity(components.len());
        for (terms, d) in components {
            comps.push((merge_terms(&name, &terms, self.vars.len())?, d));
        }
        let h = RowHandle {
            kind: RowKind::Soc,
            index: self.socs.len(),
        };
        self.register(&name, h)?;
        self.socs.push(SocRow {
            name,
            head,
            head_offset,
            components: comps,
        });
        Ok(h)
    }

    /// Adds `coef · x_a · x_b` to the objective.
    pub fn add_quad(&mut self, a: VarId, b: VarId, coef: f64) {
        if coef == 0.0 {
            return;
        }
        let key = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
        *self.quad.entry(key).or_insert(0.0) += coef;
    }

    /// Removes the `x_a · x_b` term and returns its coefficient (0 if absent).
    pub fn take_quad(&mut self, a: VarId, b: VarId) -> f64 {
        let key = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
        self.quad.remove(&key).unwrap_or(0.0)
    }

    pub fn add_linear(&mut self, a: VarId, coef: f64) {
        self.lin[a.0] += coef;
    }

    pub fn add_constant(&mut self, c: f64) {
        self.constant += c;
    }

    pub fn set_rhs(&mut self, name: &str, rhs: f64) -> Result<(), ConicError> {
        let h = self.row(name)?;
        match h.kind {
            RowKind::Eq => self.eqs[h.index].rhs = rhs,
            RowKind::Le => self.les[h.index].rhs = rhs,
            RowKind::Soc => self.socs[h.index].head_offset = rhs,
        }
        Ok(())
    }

    pub fn rhs(&self, name: &str) -> Result<f64, ConicError> {
        let h = self.row(name)?;
        match h.kind {
            RowKind::Eq => Ok(self.eqs[h.index].rhs),
            RowKind::Le => Ok(self.les[h.index].rhs),
            RowKind::Soc => Ok(self.socs[h.index].head_offset),
        }
    }

    pub fn row(&self, name: &str) -> Result<RowHandle, ConicError> {
        self.registry
            .get(name)
            .copied()
            .ok_or_else(|| ConicError::UnknownRow(name.to_string()))
    }

    pub fn has_row(&self, name: &str) -> bool {
        self.registry.contains_key(name)
    }

    pub fn var(&self, name: &str) -> Option<VarId> {
        self.var_index.get(name).copied()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.vars
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn eq_rows(&self) -> &[LinearRow] {
        &self.eqs
    }

    pub fn le_rows(&self) -> &[LinearRow] {
        &self.les
    }

    pub fn soc_rows(&self) -> &[SocRow] {
        &self.socs
    }

    pub fn registry(&self) -> &BTreeMap<String, RowHandle> {
        &self.registry
    }

    pub fn quadratic_terms(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.quad
    }

    pub fn linear_terms(&self) -> &[f64] {
        &self.lin
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    /// Multiplies the whole objective by `k`.
    pub fn scale_objective(&mut self, k: f64) {
        for v in self.quad.values_mut() {
            *v *= k;
        }
        for v in self.lin.iter_mut() {
            *v *= k;
        }
        self.constant *= k;
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let mut f = self.constant;
        for (&(a, b), &c) in &self.quad {
            f += c * x[a] * x[b];
        }
        for (c, xi) in self.lin.iter().zip(x) {
            f += c * xi;
        }
        f
    }

    pub fn objective_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.lin.clone();
        for (&(a, b), &c) in &self.quad {
            if a == b {
                g[a] += 2.0 * c * x[a];
            } else {
                g[a] += c * x[b];
                g[b] += c * x[a];
            }
        }
        g
    }

    pub fn row_activity(terms: &[(VarId, f64)], x: &[f64]) -> f64 {
        terms.iter().map(|&(v, c)| c * x[v.0]).sum()
    }

    /// `(head, ‖Wx + d‖)` of a cone row.
    pub fn soc_values(&self, row: &SocRow, x: &[f64]) -> (f64, f64) {
        let norm = row
            .components
            .iter()
            .map(|(terms, d)| (Self::row_activity(terms, x) + d).powi(2))
            .sum::<f64>()
            .sqrt();
        (Self::row_activity(&row.head, x) + row.head_offset, norm)
    }

    /// Largest violation of any row or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for r in &self.eqs {
            v = v.max((Self::row_activity(&r.terms, x) - r.rhs).abs());
        }
        for r in &self.les {
            v = v.max(Self::row_activity(&r.terms, x) - r.rhs);
        }
        for r in &self.socs {
            let (t, n) = self.soc_values(r, x);
            v = v.max(n - t);
        }
        for (k, var) in self.vars.iter().enumerate() {
            v = v.max(var.lower - x[k]).max(x[k] - var.upper);
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub rel_gap: f64,
    pub iterations: u32,
    /// Shadow prices `∂f*/∂b` of equality rows, in row order.
    pub eq_duals: Vec<f64>,
    /// Multipliers `≥ 0` of inequality rows, in row order.
    pub le_duals: Vec<f64>,
    /// Cone multipliers `(z_0, z̄)` per cone row.
    pub soc_duals: Vec<Vec<f64>>,
    pub lower_bound_duals: Vec<f64>,
    pub upper_bound_duals: Vec<f64>,
    pub primal: BTreeMap<String, f64>,
    pub duals: BTreeMap<String, f64>,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub fn value(&self, v: VarId) -> f64 {
        self.x[v.0]
    }

    pub fn dual(&self, name: &str) -> Option<f64> {
        self.duals.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x").unwrap();
        assert!(p.free_var("x").is_err());
        p.add_eq("r", &[(x, 1.0)], 1.0).unwrap();
        assert!(p.add_le("r", &[(x, 1.0)], 1.0).is_err());
    }

    #[test]
    fn terms_are_merged() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x").unwrap();
        let y = p.free_var("y").unwrap();
        p.add_eq("r", &[(x, 1.0), (y, 2.0), (x, 2.0), (y, -2.0)], 0.0).unwrap();
        assert_eq!(p.eq_rows()[0].terms, vec![(x, 3.0)]);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut p = ConicProgram::new();
        let x = p.free_var("x").unwrap();
        let y = p.free_var("y").unwrap();
        p.add_quad(x, x, 2.0);
        p.add_quad(x, y, -1.0);
        p.add_quad(y, y, 0.5);
        p.add_linear(y, 3.0);
        let pt = [0.7, -1.3];
        let g = p.objective_gradient(&pt);
        let h = 1e-6;
        for k in 0..2 {
            let mut a = pt;
            let mut b = pt;
            a[k] += h;
            b[k] -= h;
            let fd = (p.objective_value(&a) - p.objective_value(&b)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6);
        }
    }
}
