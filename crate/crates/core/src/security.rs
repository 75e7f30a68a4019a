//! Security-constrained clearing with system-wide symmetric balancing.
//!
//! State `k = 0` is the base case; states `k ≥ 1` each take one or more
//! elements out of service. Every state carries its own dispatch, flows,
//! angles and participation factors, with the RES errors of disconnected
//! units removed from the imbalance. The expected cost is charged once, on
//! the base state; contingency states enter through their constraints and,
//! in corrective mode, through the reserve bands
//!
//! ```text
//! p_i^k − p_i^0 ≤ r_i^up     (ρ⁺)
//! p_i^0 − p_i^k ≤ r_i^dw     (ρ⁻)
//! ```
//!
//! priced at `c_up`, `c_dw`. Preventive mode keeps the schedule of every
//! surviving generator fixed across states by sharing the dispatch variable,
//! so `p^k = p^0` holds exactly. A preventive state that removes a
//! generator or RES injection is infeasible unless the lost output was zero.
//!
//! Rows of state `k` carry the suffix `@k` (`balance@3@2`, `capmax@1@2`,
//! `alphasum@2`); reserve rows are `resup@<bus>,<k>` and `resdw@<bus>,<k>`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConicError, ConicProgram, SolveOptions, SolveStatus, Solution, VarId};
use crate::grid::{Generator, GridCase};
use crate::market::{add_capacity_rows, add_network_state, balance_row, capmax_row, capmin_row};
use crate::pricing::beta;
use crate::uncertainty::{assemble, BalancingPolicy, NodalErrorStats, UncertaintyError, UncertaintyModel};

#[derive(Debug, Error)]
pub enum SecurityError {
    #[error("security-constrained clearing needs a symmetric uncertainty model, got {0}")]
    Asymmetric(BalancingPolicy),
    #[error("contingency state '{0}' has no active generator")]
    NoActiveGenerators(String),
    #[error("contingency state '{0}' has RES uncertainty but no active balancing provider")]
    NoActiveProviders(String),
    #[error("contingency state '{0}' islands the network")]
    Islanded(String),
    #[error("contingency references unknown {kind} '{element}'")]
    UnknownElement { kind: &'static str, element: String },
    #[error("state 0 must be the base case with every element in service")]
    BaseState,
    #[error("mask length mismatch in state '{0}'")]
    Shape(String),
    #[error("solver returned status {0}")]
    NotOptimal(SolveStatus),
    #[error("missing dual for row {0}")]
    MissingDual(String),
    #[error("cannot read contingency file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid contingency list: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScMode {
    Preventive,
    Corrective,
}

impl std::fmt::Display for ScMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScMode::Preventive => "preventive",
            ScMode::Corrective => "corrective",
        })
    }
}

/// Which element classes `enumerate_n1` takes out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OutageClasses {
    pub lines: bool,
    pub gens: bool,
    pub res: bool,
}

impl OutageClasses {
    pub const LINES: OutageClasses = OutageClasses { lines: true, gens: false, res: false };
    pub const GENS: OutageClasses = OutageClasses { lines: false, gens: true, res: false };
    pub const ALL: OutageClasses = OutageClasses { lines: true, gens: true, res: true };
}

/// In-service masks of one state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyState {
    pub label: String,
    pub gen_active: Vec<bool>,
    pub line_active: Vec<bool>,
    pub res_active: Vec<bool>,
}

impl ContingencyState {
    pub fn base(case: &GridCase) -> Self {
        ContingencyState {
            label: "base".into(),
            gen_active: vec![true; case.generators.len()],
            line_active: vec![true; case.lines.len()],
            res_active: vec![true; case.res_units.len()],
        }
    }

    fn is_base(&self) -> bool {
        self.gen_active.iter().chain(&self.line_active).chain(&self.res_active).all(|&a| a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencySet {
    pub mode: ScMode,
    /// `states[0]` is the base case.
    pub states: Vec<ContingencyState>,
}

/// One entry of a contingency file. Lines are named by position in the
/// case's line list (0-based) or by display name (`"4-5"`); generators and
/// RES units by bus id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageSpec {
    #[serde(rename = "type")]
    pub kind: OutageKind,
    pub element: ElementRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutageKind {
    Line,
    Gen,
    Res,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ElementRef {
    Id(i64),
    Name(String),
}

impl std::fmt::Display for ElementRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ElementRef::Id(i) => write!(f, "{i}"),
            ElementRef::Name(s) => f.write_str(s),
        }
    }
}

impl ContingencySet {
    pub fn base_only(case: &GridCase, mode: ScMode) -> Self {
        ContingencySet { mode, states: vec![ContingencyState::base(case)] }
    }

    /// Number of contingency states `K`.
    pub fn num_contingencies(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Builds one state per outage entry.
    pub fn from_specs(case: &GridCase, specs: &[OutageSpec], mode: ScMode) -> Result<Self, SecurityError> {
        let mut set = ContingencySet::base_only(case, mode);
        for s in specs {
            let mut st = ContingencyState::base(case);
            let unknown = |kind| SecurityError::UnknownElement { kind, element: s.element.to_string() };
            match (s.kind, &s.element) {
                (OutageKind::Line, ElementRef::Id(l)) => {
                    let l = usize::try_from(*l).ok().filter(|&l| l < case.lines.len()).ok_or_else(|| unknown("line"))?;
                    st.line_active[l] = false;
                    st.label = format!("line {}", case.line_name(l));
                }
                (OutageKind::Line, ElementRef::Name(n)) => {
                    let l = (0..case.lines.len()).find(|&l| case.line_name(l) == *n).ok_or_else(|| unknown("line"))?;
                    st.line_active[l] = false;
                    st.label = format!("line {n}");
                }
                (OutageKind::Gen, ElementRef::Id(b)) => {
                    let i = case.generator_at(*b).ok_or_else(|| unknown("generator"))?;
                    st.gen_active[i] = false;
                    st.label = format!("gen {b}");
                }
                (OutageKind::Res, ElementRef::Id(b)) => {
                    let u = case.res_at(*b).ok_or_else(|| unknown("RES unit"))?;
                    st.res_active[u] = false;
                    st.label = format!("res {b}");
                }
                (OutageKind::Gen, _) => return Err(unknown("generator")),
                (OutageKind::Res, _) => return Err(unknown("RES unit")),
            }
            set.states.push(st);
        }
        set.validate(case)?;
        Ok(set)
    }

    pub fn read_json(case: &GridCase, path: &str, mode: ScMode) -> Result<Self, SecurityError> {
        let text = std::fs::read_to_string(path).map_err(|source| SecurityError::Io { path: path.to_string(), source })?;
        let specs: Vec<OutageSpec> = serde_json::from_str(&text)?;
        Self::from_specs(case, &specs, mode)
    }

    /// Checks mask shapes, the base state and connectivity of every state.
    pub fn validate(&self, case: &GridCase) -> Result<(), SecurityError> {
        if self.states.first().map(|s| !s.is_base()).unwrap_or(true) {
            return Err(SecurityError::BaseState);
        }
        for st in &self.states {
            if st.gen_active.len() != case.generators.len()
                || st.line_active.len() != case.lines.len()
                || st.res_active.len() != case.res_units.len()
            {
                return Err(SecurityError::Shape(st.label.clone()));
            }
            let out: Vec<bool> = st.line_active.iter().map(|a| !a).collect();
            if !case.is_connected_without(&out) {
                return Err(SecurityError::Islanded(st.label.clone()));
            }
            if !st.gen_active.iter().any(|&a| a) {
                return Err(SecurityError::NoActiveGenerators(st.label.clone()));
            }
        }
        Ok(())
    }
}

/// All single outages of the requested classes. Line outages that island
/// the network are dropped with a warning.
pub fn enumerate_n1(case: &GridCase, classes: OutageClasses, mode: ScMode) -> ContingencySet {
    let mut set = ContingencySet::base_only(case, mode);
    if classes.lines {
        let states: Vec<Option<ContingencyState>> = (0..case.lines.len())
            .into_par_iter()
            .map(|l| {
                let mut out = vec![false; case.lines.len()];
                out[l] = true;
                if !case.is_connected_without(&out) {
                    log::warn!("dropping outage of line {}: network islands", case.line_name(l));
                    return None;
                }
                let mut st = ContingencyState::base(case);
                st.line_active[l] = false;
                st.label = format!("line {}", case.line_name(l));
                Some(st)
            })
            .collect();
        set.states.extend(states.into_iter().flatten());
    }
    if classes.gens {
        for (i, g) in case.generators.iter().enumerate() {
            if case.generators.len() == 1 {
                log::warn!("dropping outage of generator {}: no generator would remain", g.bus);
                continue;
            }
            let mut st = ContingencyState::base(case);
            st.gen_active[i] = false;
            st.label = format!("gen {}", g.bus);
            set.states.push(st);
        }
    }
    if classes.res {
        for (u, r) in case.res_units.iter().enumerate() {
            let mut st = ContingencyState::base(case);
            st.res_active[u] = false;
            st.label = format!("res {}", r.bus);
            set.states.push(st);
        }
    }
    set
}

/// Variable handles of one state.
#[derive(Debug, Clone)]
pub struct StateLayout {
    pub p: Vec<VarId>,
    pub theta: Vec<VarId>,
    pub flow: Vec<VarId>,
    /// System participation per generator; `None` for non-providers.
    pub alpha: Vec<Option<VarId>>,
}

#[derive(Debug, Clone)]
pub struct ScopfModel {
    pub program: ConicProgram,
    pub states: Vec<StateLayout>,
    /// Reserve variables `(r_up, r_dw)` per generator, corrective mode only.
    pub reserves: Option<Vec<(VarId, VarId)>>,
    /// Uncertainty seen in each state.
    pub state_unc: Vec<UncertaintyModel>,
    pub contingencies: ContingencySet,
}

pub fn state_suffix(k: usize) -> String {
    format!("@{k}")
}

pub fn resup_row(gen_bus: i64, k: usize) -> String {
    format!("resup@{gen_bus},{k}")
}

pub fn resdw_row(gen_bus: i64, k: usize) -> String {
    format!("resdw@{gen_bus},{k}")
}

pub fn alphamax_row(gen_bus: i64, k: usize) -> String {
    format!("alphamax@{gen_bus}@{k}")
}

pub fn adequacy_row(k: usize) -> String {
    format!("alphasum@{k}")
}

fn state_model(unc: &UncertaintyModel, st: &ContingencyState) -> Result<UncertaintyModel, SecurityError> {
    let stats: Vec<NodalErrorStats> = unc
        .stats
        .iter()
        .zip(&st.res_active)
        .map(|(s, &on)| {
            if on {
                Ok(s.clone())
            } else {
                NodalErrorStats::from_sigma(s.node, 0.0, s.kappa)
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(assemble(BalancingPolicy::SwSb, &stats, Some(&unc.correlation))?.with_risk(unc.risk.clone()))
}

fn scaled(g: &Generator, on: bool) -> Generator {
    let t = if on { 1.0 } else { 0.0 };
    Generator { p_max: t * g.p_max, p_min: t * g.p_min, ..g.clone() }
}

/// Assembles the security-constrained program.
pub fn build_scopf(
    case: &GridCase,
    unc: &UncertaintyModel,
    contingencies: &ContingencySet,
) -> Result<ScopfModel, SecurityError> {
    if unc.policy.is_asymmetric() {
        return Err(SecurityError::Asymmetric(unc.policy));
    }
    contingencies.validate(case)?;
    let corrective = contingencies.mode == ScMode::Corrective;
    let mut prog = ConicProgram::new();
    let ng = case.generators.len();

    let base_p: Vec<VarId> = case
        .generators
        .iter()
        .map(|g| prog.free_var(format!("p@{}@0", g.bus)))
        .collect::<Result<_, _>>()?;
    let reserves = if corrective && contingencies.num_contingencies() > 0 {
        let mut r = Vec::with_capacity(ng);
        for g in &case.generators {
            let up = prog.add_var(format!("rup@{}", g.bus), 0.0, f64::INFINITY)?;
            let dw = prog.add_var(format!("rdw@{}", g.bus), 0.0, f64::INFINITY)?;
            prog.add_linear(up, g.c_up);
            prog.add_linear(dw, g.c_dw);
            r.push((up, dw));
        }
        Some(r)
    } else {
        None
    };

    let mut layouts = Vec::with_capacity(contingencies.states.len());
    let mut state_unc = Vec::with_capacity(contingencies.states.len());
    for (k, st) in contingencies.states.iter().enumerate() {
        let sfx = state_suffix(k);
        let su = state_model(unc, st)?;
        let stochastic = su.total_std > 0.0;
        if stochastic && !case.providers().iter().any(|&i| st.gen_active[i]) {
            return Err(SecurityError::NoActiveProviders(st.label.clone()));
        }
        let mut p = Vec::with_capacity(ng);
        let mut alpha = Vec::with_capacity(ng);
        for (i, g) in case.generators.iter().enumerate() {
            let pk = if k == 0 || (!corrective && st.gen_active[i]) {
                base_p[i]
            } else {
                prog.free_var(format!("p@{}{sfx}", g.bus))?
            };
            p.push(pk);
            let a = if g.is_provider() {
                Some(prog.add_var(format!("alpha@{}{sfx}", g.bus), 0.0, f64::INFINITY)?)
            } else {
                None
            };
            alpha.push(a);
        }
        let theta: Vec<VarId> = case
            .buses
            .iter()
            .map(|b| prog.free_var(format!("theta@{}{sfx}", b.id)))
            .collect::<Result<_, _>>()?;
        let flow: Vec<VarId> = (0..case.lines.len())
            .map(|l| prog.free_var(format!("f@{}{sfx}", case.line_name(l))))
            .collect::<Result<_, _>>()?;

        add_network_state(
            &mut prog,
            case,
            &p,
            &theta,
            &flow,
            |b| {
                let bus = &case.buses[b];
                let w = case
                    .res_at(bus.id)
                    .filter(|&u| st.res_active[u])
                    .map(|u| case.forecast(u))
                    .unwrap_or(0.0);
                bus.demand - w
            },
            &|l| st.line_active[l],
            &sfx,
        )?;

        let providers: Vec<(VarId, f64)> = alpha.iter().flatten().map(|&a| (a, 1.0)).collect();
        if !providers.is_empty() {
            prog.add_eq(adequacy_row(k), &providers, 1.0)?;
        }
        for (i, g) in case.generators.iter().enumerate() {
            let on = st.gen_active[i];
            let a: Vec<VarId> = alpha[i].into_iter().collect();
            add_capacity_rows(&mut prog, &scaled(g, on), &su, p[i], &a, true, &sfx)?;
            if let (false, Some(ai)) = (on, alpha[i]) {
                prog.add_le(alphamax_row(g.bus, k), &[(ai, 1.0)], 0.0)?;
            }
            if k > 0 && on {
                if let Some(r) = &reserves {
                    let (up, dw) = r[i];
                    prog.add_le(resup_row(g.bus, k), &[(p[i], 1.0), (base_p[i], -1.0), (up, -1.0)], 0.0)?;
                    prog.add_le(resdw_row(g.bus, k), &[(base_p[i], 1.0), (p[i], -1.0), (dw, -1.0)], 0.0)?;
                }
            }
        }

        // Expected cost of the base state.
        if k == 0 {
            let s2 = su.total_std * su.total_std;
            for (i, g) in case.generators.iter().enumerate() {
                prog.add_quad(p[i], p[i], g.c2);
                prog.add_linear(p[i], g.c1);
                prog.add_constant(g.c0);
                if let Some(a) = alpha[i] {
                    prog.add_quad(a, a, g.c2 * s2);
                }
            }
        }
        layouts.push(StateLayout { p, theta, flow, alpha });
        state_unc.push(su);
    }
    Ok(ScopfModel {
        program: prog,
        states: layouts,
        reserves,
        state_unc,
        contingencies: contingencies.clone(),
    })
}

/// Primal values and multipliers of one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResult {
    pub label: String,
    pub p: Vec<f64>,
    pub flows: Vec<f64>,
    pub theta: Vec<f64>,
    /// System participation per generator.
    pub alpha: Vec<f64>,
    /// Nodal participation `α_iu`, taken equal to `α_i` for every active RES.
    pub alpha_nodal: Vec<Vec<f64>>,
    /// λ^k per bus.
    pub lambda: Vec<f64>,
    pub delta_up: Vec<f64>,
    pub delta_dn: Vec<f64>,
    /// ρ⁺ and ρ⁻ per generator; zero where no reserve row exists.
    pub rho_up: Vec<f64>,
    pub rho_dn: Vec<f64>,
    /// γ^k, the system balancing price of the state.
    pub gamma: f64,
    /// χ_u^k = β_u^k γ^k.
    pub chi_nodal: Vec<f64>,
    /// `sqrt(1ᵀ Σ^k 1)`.
    pub system_std: f64,
}

/// Energy, reserve and security prices per generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScPrices {
    /// `c_up − Σ_k ρ⁺`; absent in preventive mode.
    pub pi_up: Option<Vec<f64>>,
    pub pi_dw: Option<Vec<f64>>,
    /// `2 c2 p + c1 + δ̄ − δ` of the base state.
    pub pi_p: Vec<f64>,
    /// Σ_k (ρ⁻ − ρ⁺), or the capacity form in preventive mode.
    pub pi_sc: Vec<f64>,
    pub pi_p_sc: Vec<f64>,
    /// Σ_{k≥1} (δ̄^k − δ^k − λ_i^k).
    pub pi_sc_alt: Vec<f64>,
    /// Base-state λ at each generator bus, the dual counterpart of `pi_p_sc`.
    pub lambda_base: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopfResult {
    pub mode: ScMode,
    pub objective: f64,
    pub states: Vec<StateResult>,
    pub r_up: Vec<f64>,
    pub r_dw: Vec<f64>,
    pub prices: ScPrices,
}

impl ScopfResult {
    /// Largest `|p^k − p^0|` over surviving generators and states.
    pub fn max_redispatch(&self) -> f64 {
        let base = &self.states[0].p;
        self.states[1..]
            .iter()
            .flat_map(|s| s.p.iter().zip(base).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}

fn dual(sol: &Solution, name: &str) -> Result<f64, SecurityError> {
    sol.dual(name).ok_or_else(|| SecurityError::MissingDual(name.to_string()))
}

/// Reads states, reserves and prices from an optimal solution.
pub fn decode_scopf(model: &ScopfModel, case: &GridCase, sol: &Solution) -> Result<ScopfResult, SecurityError> {
    if sol.status != SolveStatus::Optimal {
        return Err(SecurityError::NotOptimal(sol.status));
    }
    let ng = case.generators.len();
    let mut states = Vec::with_capacity(model.states.len());
    for (k, (lay, st)) in model.states.iter().zip(&model.contingencies.states).enumerate() {
        let sfx = state_suffix(k);
        let su = &model.state_unc[k];
        let alpha: Vec<f64> = lay.alpha.iter().map(|a| a.map(|v| sol.value(v)).unwrap_or(0.0)).collect();
        let alpha_nodal = alpha
            .iter()
            .map(|&a| st.res_active.iter().map(|&on| if on { a } else { 0.0 }).collect())
            .collect();
        let gamma = if lay.alpha.iter().any(Option::is_some) { dual(sol, &adequacy_row(k))? } else { 0.0 };
        let chi_nodal = beta(&su.nodal_cov).map(|b| b.iter().map(|x| x * gamma).collect()).unwrap_or_else(|_| vec![0.0; su.num_res()]);
        let mut rho_up = vec![0.0; ng];
        let mut rho_dn = vec![0.0; ng];
        if k > 0 && model.reserves.is_some() {
            for (i, g) in case.generators.iter().enumerate() {
                if st.gen_active[i] {
                    rho_up[i] = dual(sol, &resup_row(g.bus, k))?;
                    rho_dn[i] = dual(sol, &resdw_row(g.bus, k))?;
                }
            }
        }
        states.push(StateResult {
            label: st.label.clone(),
            p: lay.p.iter().map(|&v| sol.value(v)).collect(),
            flows: lay.flow.iter().map(|&v| sol.value(v)).collect(),
            theta: lay.theta.iter().map(|&v| sol.value(v)).collect(),
            alpha,
            alpha_nodal,
            lambda: case
                .buses
                .iter()
                .map(|b| dual(sol, &format!("{}{sfx}", balance_row(b.id))))
                .collect::<Result<_, _>>()?,
            delta_up: case
                .generators
                .iter()
                .map(|g| dual(sol, &format!("{}{sfx}", capmax_row(g.bus))))
                .collect::<Result<_, _>>()?,
            delta_dn: case
                .generators
                .iter()
                .map(|g| dual(sol, &format!("{}{sfx}", capmin_row(g.bus))))
                .collect::<Result<_, _>>()?,
            rho_up,
            rho_dn,
            gamma,
            chi_nodal,
            system_std: su.total_std,
        });
    }
    let (r_up, r_dw) = match &model.reserves {
        Some(r) => r.iter().map(|&(u, d)| (sol.value(u), sol.value(d))).unzip(),
        None => (vec![0.0; ng], vec![0.0; ng]),
    };
    let mut res = ScopfResult {
        mode: model.contingencies.mode,
        objective: sol.objective,
        states,
        r_up,
        r_dw,
        prices: ScPrices {
            pi_up: None,
            pi_dw: None,
            pi_p: Vec::new(),
            pi_sc: Vec::new(),
            pi_p_sc: Vec::new(),
            pi_sc_alt: Vec::new(),
            lambda_base: Vec::new(),
        },
    };
    res.prices = sc_prices(case, &res);
    Ok(res)
}

/// Reserve, energy and security prices from the state multipliers.
pub fn sc_prices(case: &GridCase, res: &ScopfResult) -> ScPrices {
    let base = &res.states[0];
    let gen_bus = |i: usize| case.bus_index(case.generators[i].bus).expect("validated generator bus");
    let n = case.generators.len();
    let pi_p: Vec<f64> = (0..n)
        .map(|i| {
            let g = &case.generators[i];
            g.marginal_cost(base.p[i]) + base.delta_up[i] - base.delta_dn[i]
        })
        .collect();
    let pi_sc_alt: Vec<f64> = (0..n)
        .map(|i| {
            res.states[1..]
                .iter()
                .map(|s| s.delta_up[i] - s.delta_dn[i] - s.lambda[gen_bus(i)])
                .sum()
        })
        .collect();
    let corrective = res.mode == ScMode::Corrective;
    let pi_sc: Vec<f64> = if corrective {
        (0..n)
            .map(|i| res.states[1..].iter().map(|s| s.rho_dn[i] - s.rho_up[i]).sum())
            .collect()
    } else {
        pi_sc_alt.clone()
    };
    let (pi_up, pi_dw) = if corrective {
        let sum = |f: &dyn Fn(&StateResult) -> f64| -> f64 { res.states[1..].iter().map(f).sum() };
        (
            Some((0..n).map(|i| case.generators[i].c_up - sum(&|s| s.rho_up[i])).collect()),
            Some((0..n).map(|i| case.generators[i].c_dw - sum(&|s| s.rho_dn[i])).collect()),
        )
    } else {
        (None, None)
    };
    ScPrices {
        pi_up,
        pi_dw,
        pi_p_sc: pi_p.iter().zip(&pi_sc).map(|(a, b)| a + b).collect(),
        pi_p,
        pi_sc,
        pi_sc_alt,
        lambda_base: (0..n).map(|i| base.lambda[gen_bus(i)]).collect(),
    }
}

/// Builds, solves and decodes.
pub fn solve_scopf(
    case: &GridCase,
    unc: &UncertaintyModel,
    contingencies: &ContingencySet,
    opts: &SolveOptions,
) -> Result<ScopfResult, SecurityError> {
    let model = build_scopf(case, unc, contingencies)?;
    let sol = conic::solve(&model.program, opts)?;
    decode_scopf(&model, case, &sol)
}

/// Per-state balance, flow-limit and capacity residuals above `tol`.
pub fn state_violations(case: &GridCase, contingencies: &ContingencySet, res: &ScopfResult, z: impl Fn(i64) -> f64 + Sync, tol: f64) -> Vec<String> {
    res.states
        .par_iter()
        .zip(&contingencies.states)
        .enumerate()
        .flat_map_iter(|(k, (s, st))| {
            let mut out = Vec::new();
            let mut inj = vec![0.0; case.num_buses()];
            for (i, g) in case.generators.iter().enumerate() {
                inj[case.bus_index(g.bus).unwrap()] += s.p[i];
                let on = if st.gen_active[i] { 1.0 } else { 0.0 };
                let zs = z(g.bus) * s.system_std * s.alpha[i];
                if s.p[i] + zs > on * g.p_max + tol * g.p_max.max(1.0) || -s.p[i] + zs > -on * g.p_min + tol * g.p_max.max(1.0) {
                    out.push(format!("state {k}: generator {} capacity", g.bus));
                }
            }
            for (u, r) in case.res_units.iter().enumerate() {
                if st.res_active[u] {
                    inj[case.bus_index(r.bus).unwrap()] += case.forecast(u);
                }
            }
            for (l, line) in case.lines.iter().enumerate() {
                let f = s.flows[l];
                inj[case.bus_index(line.from).unwrap()] -= f;
                inj[case.bus_index(line.to).unwrap()] += f;
                let lim = if st.line_active[l] { line.f_max } else { 0.0 };
                if f.abs() > lim + tol * line.f_max.max(1.0) {
                    out.push(format!("state {k}: line {} flow {f}", case.line_name(l)));
                }
            }
            let scale = case.total_demand().max(1.0);
            for (b, bus) in case.buses.iter().enumerate() {
                if (inj[b] - bus.demand).abs() > tol * scale {
                    out.push(format!("state {k}: bus {} residual {}", bus.id, inj[b] - bus.demand));
                }
            }
            out
        })
        .collect()
}

/// Covariance `Σ^k` of state `k` restricted to active RES.
pub fn state_covariance(unc: &UncertaintyModel, st: &ContingencyState) -> DMatrix<f64> {
    DMatrix::from_fn(unc.num_res(), unc.num_res(), |a, b| {
        if st.res_active[a] && st.res_active[b] {
            unc.nodal_cov[(a, b)]
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{load_case, Bus, CaseParts, Line, ResUnit};
    use crate::market::clear;
    use crate::uncertainty::assemble_for_case;

    fn data(name: &str) -> GridCase {
        load_case(format!("{}/data/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
    }

    fn sw(case: &GridCase) -> UncertaintyModel {
        assemble_for_case(BalancingPolicy::SwSb, case, None).unwrap()
    }

    #[test]
    fn triangle_line_states() {
        let case = data("triangle3");
        let set = enumerate_n1(&case, OutageClasses::LINES, ScMode::Corrective);
        assert_eq!(set.states.len(), 4);
        assert_eq!(set.num_contingencies(), 3);
    }

    #[test]
    fn radial_outage_dropped() {
        let case = GridCase::from_parts(CaseParts {
            reference_bus: Some(1),
            buses: vec![Bus { id: 1, demand: 0.0 }, Bus { id: 2, demand: 10.0 }],
            lines: vec![Line { from: 1, to: 2, x: 0.1, f_max: 100.0 }],
            generators: vec![Generator { bus: 1, c2: 0.1, c1: 1.0, c0: 0.0, p_max: 50.0, p_min: 0.0, c_up: 0.0, c_dw: 0.0 }],
            res_units: vec![ResUnit { bus: 2, forecast: 1.0, sigma: 0.1 }],
        })
        .unwrap();
        let set = enumerate_n1(&case, OutageClasses::ALL, ScMode::Corrective);
        // the only line islands, the only generator cannot go
        assert_eq!(set.num_contingencies(), 1);
        assert_eq!(set.states[1].label, "res 2");
    }

    #[test]
    fn mixed_classes_count() {
        let case = data("case5_scopf");
        let usable = (0..case.lines.len())
            .filter(|&l| {
                let mut out = vec![false; case.lines.len()];
                out[l] = true;
                case.is_connected_without(&out)
            })
            .count();
        let set = enumerate_n1(&case, OutageClasses::ALL, ScMode::Corrective);
        assert_eq!(set.num_contingencies(), usable + case.generators.len() + case.res_units.len());
    }

    #[test]
    fn contingency_file_parsing() {
        let case = data("case5_scopf");
        let specs: Vec<OutageSpec> = serde_json::from_str(
            r#"[{"type":"line","element":0},{"type":"line","element":"4-5"},{"type":"gen","element":3},{"type":"res","element":2}]"#,
        )
        .unwrap();
        let set = ContingencySet::from_specs(&case, &specs, ScMode::Preventive).unwrap();
        assert_eq!(set.num_contingencies(), 4);
        assert!(!set.states[2].line_active[5]);
        assert!(!set.states[3].gen_active[1]);
        let bad: Vec<OutageSpec> = serde_json::from_str(r#"[{"type":"gen","element":2}]"#).unwrap();
        assert!(matches!(
            ContingencySet::from_specs(&case, &bad, ScMode::Preventive),
            Err(SecurityError::UnknownElement { .. })
        ));
    }

    #[test]
    fn no_contingencies_is_base_clearing() {
        let case = data("case5_scopf");
        let unc = sw(&case);
        let opts = SolveOptions::default();
        let base = clear(BalancingPolicy::SwSb, &case, &unc, &opts).unwrap();
        for mode in [ScMode::Preventive, ScMode::Corrective] {
            let r = solve_scopf(&case, &unc, &ContingencySet::base_only(&case, mode), &opts).unwrap();
            assert!((r.objective - base.solution.objective).abs() <= 1e-6 * base.solution.objective.abs());
            assert!(r.prices.pi_sc.iter().all(|&x| x == 0.0));
            for (i, (&a, &b)) in r.prices.pi_p_sc.iter().zip(&r.prices.pi_p).enumerate() {
                assert_eq!(a, b, "gen {i}");
            }
        }
    }

    #[test]
    fn preventive_keeps_schedule() {
        let case = data("case5_scopf");
        let unc = sw(&case);
        let set = enumerate_n1(&case, OutageClasses::LINES, ScMode::Preventive);
        let r = solve_scopf(&case, &unc, &set, &SolveOptions::default()).unwrap();
        assert_eq!(r.max_redispatch(), 0.0);
        assert!(r.r_up.iter().chain(&r.r_dw).all(|&x| x == 0.0));
        assert!(r.prices.pi_up.is_none());
        let z = |b| unc.z(b);
        assert!(state_violations(&case, &set, &r, z, 1e-6).is_empty());
    }

    #[test]
    fn corrective_generator_outage() {
        let case = data("case5_scopf");
        let unc = sw(&case);
        let specs = vec![OutageSpec { kind: OutageKind::Gen, element: ElementRef::Id(5) }];
        let set = ContingencySet::from_specs(&case, &specs, ScMode::Corrective).unwrap();
        let r = solve_scopf(&case, &unc, &set, &SolveOptions::default()).unwrap();
        let s = &r.states[1];
        let out = case.generator_at(5).unwrap();
        assert!(s.alpha[out].abs() < 1e-7 && s.p[out].abs() < 1e-6);
        assert!((s.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-7);
        let z = |b| unc.z(b);
        assert!(state_violations(&case, &set, &r, z, 1e-6).is_empty());
        // redispatch stays within the bands
        for (i, g) in case.generators.iter().enumerate() {
            if i == out {
                continue;
            }
            let d = s.p[i] - r.states[0].p[i];
            assert!(d <= r.r_up[i] + 1e-6 && -d <= r.r_dw[i] + 1e-6, "gen {}", g.bus);
        }
    }

    #[test]
    fn decomposition_identities() {
        let case = data("case5_scopf");
        let unc = sw(&case);
        let set = enumerate_n1(&case, OutageClasses::ALL, ScMode::Corrective);
        let r = solve_scopf(&case, &unc, &set, &SolveOptions::default()).unwrap();
        let p = &r.prices;
        for i in 0..case.generators.len() {
            let scale = p.lambda_base[i].abs().max(1.0);
            assert!((p.pi_p_sc[i] - p.lambda_base[i]).abs() <= 1e-6 * scale, "gen {i}");
            assert!((p.pi_sc[i] - p.pi_sc_alt[i]).abs() <= 1e-6 * scale, "gen {i}");
            let up = p.pi_up.as_ref().unwrap()[i];
            assert!(up <= case.generators[i].c_up + 1e-9 && up >= -1e-6);
        }
    }

    #[test]
    fn preventive_costs_at_least_corrective() {
        let case = data("case5_scopf");
        let unc = sw(&case);
        let opts = SolveOptions::default();
        let prev = solve_scopf(&case, &unc, &enumerate_n1(&case, OutageClasses::LINES, ScMode::Preventive), &opts).unwrap();
        let corr = solve_scopf(&case, &unc, &enumerate_n1(&case, OutageClasses::LINES, ScMode::Corrective), &opts).unwrap();
        assert!(prev.objective >= corr.objective - 1e-6 * corr.objective.abs());
        // a lost injection cannot be covered by a fixed schedule
        let gens = enumerate_n1(&case, OutageClasses::GENS, ScMode::Preventive);
        assert!(matches!(
            solve_scopf(&case, &unc, &gens, &opts),
            Err(SecurityError::NotOptimal(SolveStatus::Infeasible))
        ));
    }

    #[test]
    fn asymmetric_model_rejected() {
        let case = data("triangle3");
        let unc = assemble_for_case(BalancingPolicy::N2nAb, &case, None).unwrap();
        let set = ContingencySet::base_only(&case, ScMode::Preventive);
        assert!(matches!(build_scopf(&case, &unc, &set), Err(SecurityError::Asymmetric(_))));
    }
}
