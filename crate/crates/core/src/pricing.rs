//! Energy and balancing prices, RES cost accounting and settlement.
//!
//! Stationarity of the clearing program in `α_ij` gives, for every provider
//! with `α_ij > 0`,
//!
//! ```text
//! χ_j = −M_j λ_i + (Σ A_i)_j (2 c2_i + z_i (δ̄_i + δ_i) / S_i)
//! ```
//!
//! with `λ_i = 2 c2_i (p_i − M·A_i) + c1_i + δ̄_i − δ_i`. The right-hand side
//! is the marginal balancing value `g_ij` of generator `i`; the closed-form
//! `χ_j` is the participation-weighted mean `Σ_i α_ij g_ij`, which equals the
//! common value whenever the balancing market clears.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, SolveOptions, SolveStatus, Solution};
use crate::grid::{Generator, GridCase};
use crate::market::{self, add_capacity_rows, balance_row, capmax_row, capmin_row, DispatchResult, MarketError};
use crate::uncertainty::{BalancingPolicy, Column, Direction, UncertaintyModel};

/// Participation norms below this are treated as zero.
pub const S_EPS: f64 = 1e-9;
/// Capacity multipliers below this are treated as zero.
pub const DELTA_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("zero total variance")]
    ZeroVariance,
    #[error("missing dual for row {0}")]
    MissingDual(String),
    #[error("no forecast-proportional deviation for RES at bus {0}")]
    MissingKappa(i64),
    #[error("generator at bus {0}: best response is unbounded, prices are not a valid equilibrium")]
    Unbounded(i64),
    #[error("generator at bus {0}: best response solve returned {1}")]
    BestResponse(i64, SolveStatus),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

/// Capacity-row multipliers per generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    /// δ̄_i, multiplier of `capmax@i`.
    pub upper: Vec<f64>,
    /// δ_i, multiplier of `capmin@i`.
    pub lower: Vec<f64>,
}

impl Deltas {
    pub fn from_solution(case: &GridCase, solution: &Solution) -> Result<Self, PricingError> {
        let mut upper = Vec::with_capacity(case.generators.len());
        let mut lower = Vec::with_capacity(case.generators.len());
        for g in &case.generators {
            upper.push(dual(solution, &capmax_row(g.bus))?);
            lower.push(dual(solution, &capmin_row(g.bus))?);
        }
        Ok(Deltas { upper, lower })
    }
}

fn dual(solution: &Solution, name: &str) -> Result<f64, PricingError> {
    solution.dual(name).ok_or_else(|| PricingError::MissingDual(name.to_string()))
}

/// Prices of one clearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSet {
    pub policy: BalancingPolicy,
    pub columns: Vec<Column>,
    /// λ per bus. Closed-form sets only fill generator buses.
    pub lambda: Vec<Option<f64>>,
    /// χ per balancing column.
    pub chi: Vec<f64>,
    /// Marginal balancing value `g_ij` per generator and column; empty rows
    /// for non-providers. Only closed-form sets carry it.
    pub marginal_balancing: Vec<Vec<f64>>,
    /// Covariance shares of the RES units for symmetric policies.
    pub beta: Option<Vec<f64>>,
    /// Shares of the downward and upward blocks for asymmetric policies.
    pub beta_minus: Option<Vec<f64>>,
    pub beta_plus: Option<Vec<f64>>,
    pub deltas: Deltas,
    /// Generators whose `z/S` term was undefined (`S ≈ 0` with a binding
    /// capacity row).
    pub flags: Vec<String>,
}

impl PriceSet {
    fn chi_by(&self, f: impl Fn(&Column) -> bool) -> Vec<f64> {
        self.columns.iter().zip(&self.chi).filter(|(c, _)| f(c)).map(|(_, &x)| x).collect()
    }

    /// χ (SW-SB) or `[χ⁻, χ⁺]` (SW-AB).
    pub fn chi_sw(&self) -> Option<Vec<f64>> {
        self.policy.is_system_wide().then(|| self.chi.clone())
    }

    /// χ_u per RES (N2N-SB).
    pub fn chi_nodal(&self) -> Option<Vec<f64>> {
        (self.policy == BalancingPolicy::N2nSb).then(|| self.chi.clone())
    }

    /// χ⁻_u per RES (N2N-AB).
    pub fn chi_minus(&self) -> Option<Vec<f64>> {
        (self.policy == BalancingPolicy::N2nAb)
            .then(|| self.chi_by(|c| matches!(c, Column::Node { dir: Direction::Minus, .. })))
    }

    /// χ⁺_u per RES (N2N-AB).
    pub fn chi_plus(&self) -> Option<Vec<f64>> {
        (self.policy == BalancingPolicy::N2nAb)
            .then(|| self.chi_by(|c| matches!(c, Column::Node { dir: Direction::Plus, .. })))
    }

    pub fn lambda_at(&self, case: &GridCase, bus: i64) -> Option<f64> {
        case.bus_index(bus).and_then(|b| self.lambda[b])
    }
}

/// Covariance shares `β_u = Σ_v σ_uv / Σ_vw σ_vw`.
pub fn beta(sigma: &DMatrix<f64>) -> Result<Vec<f64>, PricingError> {
    let total = sigma.sum();
    if total.abs() < 1e-300 || !total.is_finite() {
        return Err(PricingError::ZeroVariance);
    }
    Ok((0..sigma.nrows()).map(|u| sigma.row(u).sum() / total).collect())
}

/// Nodal covariance of the downward (`Direction::Minus`) or upward parts.
pub fn directional_cov(unc: &UncertaintyModel, dir: Direction) -> DMatrix<f64> {
    let u = unc.num_res();
    DMatrix::from_fn(u, u, |a, b| {
        let s = |k: usize| match dir {
            Direction::Minus => unc.stats[k].sigma_minus,
            _ => unc.stats[k].sigma_plus,
        };
        unc.correlation[(a, b)] * s(a) * s(b)
    })
}

fn betas(unc: &UncertaintyModel) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    if !unc.policy.is_stochastic() {
        return (None, None, None);
    }
    if unc.policy.is_asymmetric() {
        (
            None,
            beta(&directional_cov(unc, Direction::Minus)).ok(),
            beta(&directional_cov(unc, Direction::Plus)).ok(),
        )
    } else {
        (beta(&unc.nodal_cov).ok(), None, None)
    }
}

/// Prices read from the solver's multipliers.
pub fn dual_prices(
    case: &GridCase,
    unc: &UncertaintyModel,
    solution: &Solution,
) -> Result<PriceSet, PricingError> {
    let lambda = case
        .buses
        .iter()
        .map(|b| dual(solution, &balance_row(b.id)).map(Some))
        .collect::<Result<_, _>>()?;
    let chi = unc
        .columns
        .iter()
        .map(|c| dual(solution, &c.row_name()))
        .collect::<Result<_, _>>()?;
    let (beta, beta_minus, beta_plus) = betas(unc);
    Ok(PriceSet {
        policy: unc.policy,
        columns: unc.columns.clone(),
        lambda,
        chi,
        marginal_balancing: Vec::new(),
        beta,
        beta_minus,
        beta_plus,
        deltas: Deltas::from_solution(case, solution)?,
        flags: Vec::new(),
    })
}

/// Local energy price implied by generator `i`'s stationarity in `p_i`.
pub fn lambda_gen(g: &Generator, p: f64, mean_shift: f64, d_up: f64, d_dn: f64) -> f64 {
    2.0 * g.c2 * (p - mean_shift) + g.c1 + d_up - d_dn
}

/// Evaluates the closed-form prices at a dispatch.
pub fn closed_form_prices(
    case: &GridCase,
    unc: &UncertaintyModel,
    d: &DispatchResult,
    deltas: &Deltas,
) -> PriceSet {
    let k = unc.num_columns();
    let mut lambda = vec![None; case.buses.len()];
    let mut g_all = Vec::with_capacity(case.generators.len());
    let mut flags = Vec::new();
    let mut chi = vec![0.0; k];
    for (i, g) in case.generators.iter().enumerate() {
        let a = &d.alpha[i];
        let m = unc.mean_of(a);
        let (du, dl) = (deltas.upper[i], deltas.lower[i]);
        let lam = lambda_gen(g, d.p[i], m, du, dl);
        if let Some(b) = case.bus_index(g.bus) {
            lambda[b] = Some(lam);
        }
        if !g.is_provider() || k == 0 {
            g_all.push(Vec::new());
            continue;
        }
        let s = d.s[i];
        let z = unc.z(g.bus);
        let ratio = if s >= S_EPS {
            z * (du + dl) / s
        } else {
            if du + dl > DELTA_EPS {
                flags.push(format!(
                    "generator {}: participation norm {s:e} with binding capacity row, z/S term set to 0",
                    g.bus
                ));
            }
            0.0
        };
        let sa = &unc.covariance * nalgebra::DVector::from_column_slice(a);
        let gi: Vec<f64> = (0..k)
            .map(|j| -unc.mean_vector[j] * lam + sa[j] * (2.0 * g.c2 + ratio))
            .collect();
        for j in 0..k {
            chi[j] += a[j] * gi[j];
        }
        g_all.push(gi);
    }
    // Normalise by the adequacy sums, which are 1 at a feasible dispatch.
    for (j, c) in chi.iter_mut().enumerate() {
        let tot: f64 = d.alpha.iter().map(|a| a.get(j).copied().unwrap_or(0.0)).sum();
        if tot > 0.0 {
            *c /= tot;
        }
    }
    let (beta, beta_minus, beta_plus) = betas(unc);
    PriceSet {
        policy: unc.policy,
        columns: unc.columns.clone(),
        lambda,
        chi,
        marginal_balancing: g_all,
        beta,
        beta_minus,
        beta_plus,
        deltas: deltas.clone(),
        flags,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceMismatch {
    pub name: String,
    pub closed_form: f64,
    pub dual: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<PriceMismatch>,
}

impl PriceReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares every closed-form price with the matching row multiplier:
/// `|closed − dual| / max(1, |dual|) ≤ tol`.
pub fn check_against_duals(
    prices: &PriceSet,
    case: &GridCase,
    solution: &Solution,
    tol: f64,
) -> Result<PriceReport, PricingError> {
    let mut rep = PriceReport::default();
    let mut check = |name: String, closed: f64, dual: f64| {
        let rel = (closed - dual).abs() / dual.abs().max(1.0);
        rep.checked += 1;
        rep.max_rel_error = rep.max_rel_error.max(rel);
        if !(rel <= tol) {
            rep.failures.push(PriceMismatch { name, closed_form: closed, dual, rel_error: rel });
        }
    };
    for (b, bus) in case.buses.iter().enumerate() {
        if let Some(l) = prices.lambda[b] {
            let row = balance_row(bus.id);
            check(row.clone(), l, dual(solution, &row)?);
        }
    }
    for (col, &c) in prices.columns.iter().zip(&prices.chi) {
        let row = col.row_name();
        check(row.clone(), c, dual(solution, &row)?);
    }
    Ok(rep)
}

/// Balancing charge per RES unit.
///
/// Node-to-node policies charge `C_u = Σ_{j ∈ u} χ_j Σ_i α_ij`. System-wide
/// policies split each system price by the covariance shares `β`.
pub fn res_balancing_cost(prices: &PriceSet, alpha: &[Vec<f64>], num_res: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_res];
    for (j, col) in prices.columns.iter().enumerate() {
        let used: f64 = alpha.iter().map(|a| a.get(j).copied().unwrap_or(0.0)).sum();
        let pay = prices.chi[j] * used;
        match *col {
            Column::Node { res, .. } => out[res] += pay,
            Column::System(dir) => {
                let shares = match dir {
                    Direction::Minus => prices.beta_minus.as_ref(),
                    Direction::Plus => prices.beta_plus.as_ref(),
                    Direction::Both => prices.beta.as_ref(),
                };
                if let Some(b) = shares {
                    for u in 0..num_res {
                        out[u] += b[u] * pay;
                    }
                }
            }
        }
    }
    out
}

/// Marginal accounting of one RES unit under node-to-node symmetric balancing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResMarginal {
    pub bus: i64,
    /// Energy price at the RES bus.
    pub lambda: f64,
    /// Marginal cost of its uncertainty, $/MWh.
    pub cost_rate: f64,
    /// `C_u^w = c_u w_u`, $/h.
    pub total_cost: f64,
    /// `R_u = (λ_u − c_u) w_u`, $/h.
    pub revenue: f64,
}

impl ResMarginal {
    pub fn new(bus: i64, lambda: f64, cost_rate: f64, forecast: f64) -> Self {
        ResMarginal {
            bus,
            lambda,
            cost_rate,
            total_cost: cost_rate * forecast,
            revenue: (lambda - cost_rate) * forecast,
        }
    }
}

/// Marginal balancing cost of each RES with `σ_u = κ_u w_u`:
/// `c_u = Σ_i Σ_v α_iu α_iv ζ_uv κ_u σ_v / S_i · (2 c2_i S_i + z_i (δ̄_i + δ_i))`.
pub fn res_marginal_cost(
    case: &GridCase,
    unc: &UncertaintyModel,
    d: &DispatchResult,
    prices: &PriceSet,
) -> Result<Vec<ResMarginal>, PricingError> {
    let u_count = unc.num_res();
    let mut out = Vec::with_capacity(u_count);
    for u in 0..u_count {
        let st = &unc.stats[u];
        let kappa = st.kappa.ok_or(PricingError::MissingKappa(st.node))?;
        let mut rate = 0.0;
        for (i, g) in case.generators.iter().enumerate() {
            let a = &d.alpha[i];
            if a.len() != u_count || a[u] == 0.0 {
                continue;
            }
            let s = d.s[i];
            let inner: f64 = (0..u_count)
                .map(|v| a[u] * a[v] * unc.correlation[(u, v)] * kappa * unc.stats[v].sigma)
                .sum();
            let bracket_over_s = if s >= S_EPS {
                2.0 * g.c2 + unc.z(g.bus) * (prices.deltas.upper[i] + prices.deltas.lower[i]) / s
            } else {
                2.0 * g.c2
            };
            rate += inner * bracket_over_s;
        }
        let w = case.forecast(
            case.res_units.iter().position(|r| r.bus == st.node).unwrap_or(u),
        );
        let lambda = prices.lambda_at(case, st.node).unwrap_or(f64::NAN);
        out.push(ResMarginal::new(st.node, lambda, rate, w));
    }
    Ok(out)
}

/// Money flows of one clearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settlement {
    /// λD = Σ λ_b D_b.
    pub consumer_payment: f64,
    /// Σ λ_u w_u.
    pub res_energy_payment: f64,
    /// Σ_u C_u^α, paid by the RES units to the reserve providers.
    pub res_balancing_charge: f64,
    /// λW, energy payment net of balancing charges.
    pub res_payment: f64,
    /// λ_i p_i + Σ_j χ_j α_ij.
    pub gen_revenue: Vec<f64>,
    pub gen_cost: Vec<f64>,
    /// Revenue minus expected cost.
    pub gen_profit: Vec<f64>,
    pub res_balancing_cost: Vec<f64>,
    /// Σ_l f_l (λ_to − λ_from).
    pub congestion_rent: f64,
    /// λD − λW − Σ_i revenue_i.
    pub adequacy_gap: f64,
}

/// Settles a clearing at the given (complete) prices.
pub fn settle(case: &GridCase, unc: &UncertaintyModel, prices: &PriceSet, d: &DispatchResult) -> Settlement {
    let lam = |b: usize| prices.lambda[b].unwrap_or(0.0);
    let consumer_payment: f64 = case.buses.iter().enumerate().map(|(b, bus)| lam(b) * bus.demand).sum();
    let res_energy_payment: f64 = (0..case.res_units.len())
        .map(|u| {
            let b = case.bus_index(case.res_units[u].bus).expect("validated RES bus");
            lam(b) * case.forecast(u)
        })
        .sum();
    let res_cost = res_balancing_cost(prices, &d.alpha, unc.num_res());
    let res_balancing_charge: f64 = res_cost.iter().sum();
    let mut gen_revenue = Vec::with_capacity(case.generators.len());
    for (i, g) in case.generators.iter().enumerate() {
        let b = case.bus_index(g.bus).expect("validated generator bus");
        let bal: f64 = d.alpha[i].iter().zip(&prices.chi).map(|(a, c)| a * c).sum();
        gen_revenue.push(lam(b) * d.p[i] + bal);
    }
    let gen_profit = gen_revenue.iter().zip(&d.gen_cost).map(|(r, c)| r - c).collect();
    let congestion_rent = case
        .lines
        .iter()
        .enumerate()
        .map(|(l, line)| {
            let f = case.bus_index(line.from).expect("validated line");
            let t = case.bus_index(line.to).expect("validated line");
            d.flows[l] * (lam(t) - lam(f))
        })
        .sum();
    let res_payment = res_energy_payment - res_balancing_charge;
    let adequacy_gap = consumer_payment - res_payment - gen_revenue.iter().sum::<f64>();
    Settlement {
        consumer_payment,
        res_energy_payment,
        res_balancing_charge,
        res_payment,
        gen_revenue,
        gen_cost: d.gen_cost.clone(),
        gen_profit,
        res_balancing_cost: res_cost,
        congestion_rent,
        adequacy_gap,
    }
}

/// Expected profit of a generator at fixed prices.
pub fn profit(g: &Generator, unc: &UncertaintyModel, lambda: f64, chi: &[f64], p: f64, alpha: &[f64]) -> Result<f64, PricingError> {
    let mean: Vec<f64> = unc.mean_vector.iter().copied().collect();
    let cost = market::expected_cost(g, p, alpha, &mean, &unc.covariance)?;
    let bal: f64 = alpha.iter().zip(chi).map(|(a, c)| a * c).sum();
    Ok(lambda * p + bal - cost)
}

/// Optimal self-dispatch of one generator at fixed prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestResponse {
    pub p: f64,
    pub alpha: Vec<f64>,
    pub profit: f64,
}

/// Maximises expected profit `λ p + χ·α − C(p, α)` subject to the generator's
/// own chance-constrained capacity rows and `α ≥ 0`.
pub fn best_response(
    g: &Generator,
    unc: &UncertaintyModel,
    lambda: f64,
    chi: &[f64],
    opts: &SolveOptions,
) -> Result<BestResponse, PricingError> {
    let k = if g.is_provider() { unc.num_columns() } else { 0 };
    let mut prog = ConicProgram::new();
    let p = prog.free_var("p")?;
    let a: Vec<_> = (0..k)
        .map(|j| {
            // Columns with variance are bounded by the capacity cones; an
            // explicit α ≤ 1 there only degrades the interior point method.
            let ub = if unc.covariance[(j, j)] > 0.0 { f64::INFINITY } else { 1.0 };
            prog.add_var(format!("alpha{j}"), 0.0, ub)
        })
        .collect::<Result<_, _>>()?;
    prog.add_quad(p, p, g.c2);
    prog.add_linear(p, g.c1 - lambda);
    prog.add_constant(g.c0);
    for j in 0..k {
        let mj = unc.mean_vector[j];
        prog.add_quad(p, a[j], -2.0 * g.c2 * mj);
        prog.add_linear(a[j], -g.c1 * mj - chi[j]);
        for l in 0..k {
            prog.add_quad(a[j], a[l], g.c2 * (mj * unc.mean_vector[l] + unc.covariance[(j, l)]));
        }
    }
    let linear_sw = unc.policy == BalancingPolicy::SwSb;
    add_capacity_rows(&mut prog, g, unc, p, &a, linear_sw, "")?;
    let sol = conic::solve(&prog, opts)?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Unbounded => return Err(PricingError::Unbounded(g.bus)),
        s => return Err(PricingError::BestResponse(g.bus, s)),
    }
    let pv = sol.value(p);
    let av: Vec<f64> = a.iter().map(|&v| sol.value(v)).collect();
    let chi_k = &chi[..k];
    Ok(BestResponse {
        profit: profit(g, unc, lambda, chi_k, pv, &av)?,
        p: pv,
        alpha: av,
    })
}

/// Clearing, dual prices and settlement of one policy.
#[derive(Debug, Clone)]
pub struct PricedClearing {
    pub clearing: market::Clearing,
    pub prices: PriceSet,
    pub closed_form: PriceSet,
    pub settlement: Settlement,
}

pub fn price_clearing(
    case: &GridCase,
    unc: &UncertaintyModel,
    clearing: market::Clearing,
) -> Result<PricedClearing, PricingError> {
    let prices = dual_prices(case, unc, &clearing.solution)?;
    let closed_form = closed_form_prices(case, unc, &clearing.dispatch, &prices.deltas);
    let settlement = settle(case, unc, &prices, &clearing.dispatch);
    Ok(PricedClearing {
        clearing,
        prices,
        closed_form,
        settlement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{load_case, Bus, CaseParts, ResUnit};
    use crate::market::clear;
    use crate::uncertainty::{assemble, assemble_for_case, NodalErrorStats};

    fn data(name: &str) -> GridCase {
        load_case(format!("{}/data/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
    }

    fn gen(bus: i64, c2: f64, c1: f64, p_min: f64, p_max: f64) -> Generator {
        Generator { bus, c2, c1, c0: 0.0, p_max, p_min, c_up: 0.0, c_dw: 0.0 }
    }

    fn priced(policy: BalancingPolicy, case: &GridCase) -> (UncertaintyModel, PricedClearing) {
        let unc = assemble_for_case(policy, case, None).unwrap();
        let c = clear(policy, case, &unc, &SolveOptions::default()).unwrap();
        let pc = price_clearing(case, &unc, c).unwrap();
        (unc, pc)
    }

    #[test]
    fn lambda_of_unconstrained_generator() {
        let g = gen(1, 1.0, 5.0, 0.0, 100.0);
        assert_eq!(lambda_gen(&g, 10.0, 0.0, 0.0, 0.0), 25.0);
        // a mean shift of 1 lowers the expected output by 1
        assert_eq!(lambda_gen(&g, 10.0, 1.0, 0.0, 0.0), 23.0);
    }

    #[test]
    fn beta_shares() {
        let b = beta(&DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 3.0]))).unwrap();
        assert!((b[0] - 0.25).abs() < 1e-15 && (b[1] - 0.75).abs() < 1e-15);
        let b = beta(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(b, vec![0.5, 0.5]);
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 2.0, 0.0, 0.5, 0.0, 1.0]);
        let b = beta(&m).unwrap();
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((b[0] - 5.5 / 10.0).abs() < 1e-15);
        assert!(matches!(beta(&DMatrix::zeros(2, 2)), Err(PricingError::ZeroVariance)));
    }

    #[test]
    fn beta_reproduces_published_shares() {
        // χ_u of the 118-bus symmetric run, nodes 3, 8, ..., 53
        let chi = [0.4, 2.822, 2.102, 2.634, 2.036, 1.539, 0.862, 8.258, 1.307, 0.749, 0.205];
        let total: f64 = chi.iter().sum();
        assert!((total - 22.914).abs() < 1e-9);
        let case = data("ieee118_wind");
        let unc = assemble_for_case(BalancingPolicy::N2nSb, &case, None).unwrap();
        let b = beta(&unc.nodal_cov).unwrap();
        for (u, c) in chi.iter().enumerate() {
            assert!((b[u] - c / total).abs() < 5e-3, "node {}: {} vs {}", unc.stats[u].node, b[u], c / total);
        }
        assert!((b[7] - 8.258 / 22.9).abs() < 1e-3);
    }

    #[test]
    fn closed_form_matches_duals() {
        let case = data("case10");
        for policy in BalancingPolicy::ALL {
            let (_, pc) = priced(policy, &case);
            let rep = check_against_duals(&pc.closed_form, &case, &pc.clearing.solution, 1e-5).unwrap();
            assert!(rep.passed(), "{policy}: {:?}", rep.failures);
            assert_eq!(rep.checked, case.generators.len() + pc.prices.chi.len());
        }
    }

    #[test]
    fn perturbed_dispatch_fails_every_check() {
        let case = data("case10");
        let (_, pc) = priced(BalancingPolicy::N2nSb, &case);
        let mut d = pc.clearing.dispatch.clone();
        for p in d.p.iter_mut() {
            *p += 5.0;
        }
        for a in d.alpha.iter_mut() {
            for x in a.iter_mut() {
                *x *= 1.5;
            }
        }
        let unc = assemble_for_case(BalancingPolicy::N2nSb, &case, None).unwrap();
        d.s = d.alpha.iter().map(|a| unc.std_of(a)).collect();
        let bad = closed_form_prices(&case, &unc, &d, &pc.prices.deltas);
        let rep = check_against_duals(&bad, &case, &pc.clearing.solution, 1e-5).unwrap();
        assert_eq!(rep.failures.len(), rep.checked);
    }

    #[test]
    fn nodal_prices_split_system_price() {
        let case = data("case10");
        let (_, sw) = priced(BalancingPolicy::SwSb, &case);
        let (_, n2n) = priced(BalancingPolicy::N2nSb, &case);
        let chi = sw.prices.chi[0];
        let nodal = n2n.prices.chi_nodal().unwrap();
        let b = n2n.prices.beta.as_ref().unwrap();
        assert!((nodal.iter().sum::<f64>() - chi).abs() <= 1e-6 * chi.abs());
        for (x, bu) in nodal.iter().zip(b) {
            assert!((x - bu * chi).abs() <= 1e-6 * chi.abs().max(1.0));
        }
        let rel = (sw.clearing.dispatch.expected_cost - n2n.clearing.dispatch.expected_cost).abs()
            / n2n.clearing.dispatch.expected_cost;
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn asymmetric_accessors() {
        let case = data("triangle3");
        let (_, pc) = priced(BalancingPolicy::N2nAb, &case);
        assert_eq!(pc.prices.chi_minus().unwrap().len(), 1);
        assert_eq!(pc.prices.chi_plus().unwrap().len(), 1);
        assert!(pc.prices.chi_sw().is_none());
        let bm = pc.prices.beta_minus.as_ref().unwrap();
        assert!((bm.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn capacity_multipliers_complementary() {
        let case = data("case10");
        for policy in BalancingPolicy::ALL {
            let (unc, pc) = priced(policy, &case);
            let d = &pc.clearing.dispatch;
            for (i, g) in case.generators.iter().enumerate() {
                let m = unc.mean_of(&d.alpha[i]);
                let zs = unc.z(g.bus) * d.s[i];
                let up = g.p_max - d.p[i] + m - zs;
                let dn = d.p[i] - m - zs - g.p_min;
                let du = pc.prices.deltas.upper[i];
                let dl = pc.prices.deltas.lower[i];
                assert!(du >= -1e-9 && dl >= -1e-9);
                assert!(du * up.max(0.0) <= 1e-6 * g.p_max.max(1.0), "{policy} gen {}: {du} * {up}", g.bus);
                assert!(dl * dn.max(0.0) <= 1e-6 * g.p_max.max(1.0), "{policy} gen {}: {dl} * {dn}", g.bus);
            }
        }
    }

    fn two_res_case(sigma2: f64) -> GridCase {
        GridCase::from_parts(CaseParts {
            reference_bus: Some(1),
            buses: vec![Bus { id: 1, demand: 50.0 }, Bus { id: 2, demand: 100.0 }],
            lines: vec![crate::grid::Line { from: 1, to: 2, x: 0.1, f_max: 1000.0 }],
            generators: vec![gen(1, 0.1, 10.0, 0.0, 200.0), gen(2, 0.2, 12.0, 0.0, 200.0)],
            res_units: vec![
                ResUnit { bus: 1, forecast: 20.0, sigma: 3.0 },
                ResUnit { bus: 2, forecast: 10.0, sigma: sigma2 },
            ],
        })
        .unwrap()
    }

    #[test]
    fn zero_variance_res_pays_nothing() {
        let case = two_res_case(0.0);
        let (unc, pc) = priced(BalancingPolicy::N2nSb, &case);
        let cost = res_balancing_cost(&pc.prices, &pc.clearing.dispatch.alpha, 2);
        assert!(cost[1].abs() < 1e-6, "{cost:?}");
        let m = res_marginal_cost(&case, &unc, &pc.clearing.dispatch, &pc.prices).unwrap();
        assert_eq!(m[1].cost_rate, 0.0);
        assert_eq!(m[1].revenue, m[1].lambda * 10.0);
    }

    #[test]
    fn balancing_cost_is_nodal_price() {
        let case = data("case10");
        let (unc, pc) = priced(BalancingPolicy::N2nSb, &case);
        let d = &pc.clearing.dispatch;
        let cost = res_balancing_cost(&pc.prices, &d.alpha, unc.num_res());
        // expanded form Σ_i α_iu χ_u
        for (u, &c) in cost.iter().enumerate() {
            let expanded: f64 = d.alpha.iter().map(|a| a[u] * pc.prices.chi[u]).sum();
            assert!((c - expanded).abs() < 1e-6);
            assert!((c - pc.prices.chi[u]).abs() < 1e-6);
        }
    }

    #[test]
    fn marginal_cost_equals_balancing_cost() {
        let case = data("case10");
        let (unc, pc) = priced(BalancingPolicy::N2nSb, &case);
        let d = &pc.clearing.dispatch;
        let m = res_marginal_cost(&case, &unc, d, &pc.prices).unwrap();
        let alpha_cost = res_balancing_cost(&pc.prices, &d.alpha, unc.num_res());
        for (mu, ca) in m.iter().zip(&alpha_cost) {
            assert!((mu.total_cost - ca).abs() <= 1e-6 * ca.abs().max(1.0), "{} vs {}", mu.total_cost, ca);
        }
    }

    #[test]
    fn res_revenue_arithmetic() {
        let r = ResMarginal::new(7, 20.0, 3.0, 10.0);
        assert_eq!(r.revenue, 170.0);
        assert_eq!(r.total_cost, 30.0);
    }

    #[test]
    fn missing_kappa_rejected() {
        let mut case = two_res_case(1.0);
        case.res_units[1].forecast = 0.0;
        let (unc, pc) = priced(BalancingPolicy::N2nSb, &case);
        let err = res_marginal_cost(&case, &unc, &pc.clearing.dispatch, &pc.prices).unwrap_err();
        assert!(matches!(err, PricingError::MissingKappa(2)));
    }

    fn one_bus(demand: f64) -> GridCase {
        GridCase::from_parts(CaseParts {
            reference_bus: Some(1),
            buses: vec![Bus { id: 1, demand }],
            lines: vec![],
            generators: vec![gen(1, 0.1, 10.0, 0.0, 500.0)],
            res_units: vec![],
        })
        .unwrap()
    }

    #[test]
    fn single_generator_settlement() {
        let case = one_bus(100.0);
        let (_, pc) = priced(BalancingPolicy::Deterministic, &case);
        let st = &pc.settlement;
        // λ = 2·0.1·100 + 10 = 30, Π = 30·100 − (0.1·100² + 10·100)
        assert!((pc.prices.lambda[0].unwrap() - 30.0).abs() < 1e-5);
        assert!((st.gen_profit[0] - 1000.0).abs() < 1e-3);
        assert!((st.consumer_payment - 3000.0).abs() < 1e-3);
        assert!(st.adequacy_gap.abs() < 1e-3);
    }

    #[test]
    fn zero_demand_pays_nothing() {
        let case = one_bus(0.0);
        let (_, pc) = priced(BalancingPolicy::Deterministic, &case);
        let st = &pc.settlement;
        assert!(st.consumer_payment.abs() < 1e-6);
        assert!(st.res_payment.abs() < 1e-6);
        assert!(st.gen_revenue[0].abs() < 1e-6);
    }

    #[test]
    fn adequacy_gap_is_congestion_rent() {
        let case = data("triangle3");
        for policy in BalancingPolicy::ALL {
            let (_, pc) = priced(policy, &case);
            let st = &pc.settlement;
            assert!((st.adequacy_gap - st.congestion_rent).abs() <= 1e-5 * st.consumer_payment, "{policy}");
        }
    }

    fn one_res_model(policy: BalancingPolicy, sigma: f64) -> UncertaintyModel {
        assemble(policy, &[NodalErrorStats::from_sigma(3, sigma, None).unwrap()], None).unwrap()
    }

    #[test]
    fn best_response_corner() {
        let g = gen(1, 0.05, 20.0, 10.0, 100.0);
        let unc = one_res_model(BalancingPolicy::SwSb, 2.0);
        let br = best_response(&g, &unc, 5.0, &[0.0], &SolveOptions::default()).unwrap();
        assert!((br.p - 10.0).abs() < 1e-5, "{br:?}");
        assert!(br.alpha[0].abs() < 1e-5);
    }

    #[test]
    fn best_response_monotone_in_price() {
        let case = data("case10");
        let (unc, pc) = priced(BalancingPolicy::N2nSb, &case);
        let opts = SolveOptions::default();
        for (i, g) in case.generators.iter().enumerate().filter(|(_, g)| g.is_provider()) {
            let lam = pc.prices.lambda_at(&case, g.bus).unwrap();
            let base = best_response(g, &unc, lam, &pc.prices.chi, &opts).unwrap();
            let mut chi = pc.prices.chi.clone();
            chi[0] *= 2.0;
            let up = best_response(g, &unc, lam, &chi, &opts).unwrap();
            assert!(up.alpha[0] >= base.alpha[0] - 1e-6, "gen {i}: {} < {}", up.alpha[0], base.alpha[0]);
        }
    }

    #[test]
    fn cleared_profit_is_best_response() {
        let case = data("case10");
        let opts = SolveOptions::default();
        for policy in BalancingPolicy::ALL {
            let (unc, pc) = priced(policy, &case);
            for (i, g) in case.generators.iter().enumerate() {
                let lam = pc.prices.lambda_at(&case, g.bus).unwrap();
                let br = best_response(g, &unc, lam, &pc.prices.chi, &opts).unwrap();
                let cleared = pc.settlement.gen_profit[i];
                assert!(br.profit - cleared <= 1e-5 * cleared.abs().max(1.0), "{policy} gen {}", g.bus);
                // the cleared point is feasible for the generator, so it cannot beat the optimum
                assert!(cleared - br.profit <= 1e-5 * cleared.abs().max(1.0));
            }
        }
    }
}
