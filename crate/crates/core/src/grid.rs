//! Network cases: buses, DC lines, generators with quadratic costs and
//! renewable (RES) units with point forecasts.
//!
//! Cases are read from and written to a single JSON document:
//!
//! ```json
//! {"version":1,"reference_bus":1,
//!  "buses":[{"id":1,"demand":0.0}],
//!  "lines":[{"from":1,"to":2,"x":0.1,"f_max":100.0}],
//!  "generators":[{"bus":1,"c2":0.1,"c1":20.0,"c0":0.0,"p_max":100.0,"p_min":0.0,"c_up":5.0,"c_dw":5.0}],
//!  "res":[{"bus":2,"forecast":10.0,"sigma":2.0}]}
//! ```
//!
//! MATPOWER cases can be converted with `tools/matpower_to_case.py`; the
//! column files are not parsed here.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CASE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: i64,
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: i64,
    pub to: i64,
    /// Series reactance in p.u.
    pub x: f64,
    pub f_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: i64,
    pub c2: f64,
    pub c1: f64,
    #[serde(default)]
    pub c0: f64,
    pub p_max: f64,
    #[serde(default)]
    pub p_min: f64,
    #[serde(default)]
    pub c_up: f64,
    #[serde(default)]
    pub c_dw: f64,
}

impl Generator {
    /// Deterministic cost `c2 p² + c1 p + c0`.
    pub fn cost(&self, p: f64) -> f64 {
        self.c2 * p * p + self.c1 * p + self.c0
    }

    pub fn marginal_cost(&self, p: f64) -> f64 {
        2.0 * self.c2 * p + self.c1
    }

    /// Generators with a non-degenerate output range can provide balancing.
    pub fn is_provider(&self) -> bool {
        self.p_max > self.p_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResUnit {
    pub bus: i64,
    pub forecast: f64,
    pub sigma: f64,
}

/// A validated network case. Entities are sorted by bus id.
///
/// RES forecasts and sigmas are stored at nominal size together with a
/// cumulative `res_scale`; use [`GridCase::forecast`] and
/// [`GridCase::sigma`] for the effective values. Keeping the product of all
/// scale factors separate makes repeated scaling exact.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub reference_bus: i64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub res_units: Vec<ResUnit>,
    pub res_scale: f64,
    bus_pos: BTreeMap<i64, usize>,
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read case file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("case parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported case version {0}")]
    Version(u32),
    #[error("invalid case: {0}")]
    Invalid(ValidationReport),
    #[error("scale factor must be positive, got {0}")]
    ScaleFactor(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub entity: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entity.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.entity, self.message)
        }
    }
}

/// Every violated case invariant. Empty iff the case is clean.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.issues.iter().any(|i| i.to_string().contains(text))
    }

    fn push(&mut self, entity: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            entity: entity.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.issues.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaseFile {
    version: u32,
    #[serde(default)]
    reference_bus: Option<i64>,
    buses: Vec<Bus>,
    #[serde(default)]
    lines: Vec<Line>,
    #[serde(default)]
    generators: Vec<Generator>,
    #[serde(default)]
    res: Vec<ResUnit>,
}

/// Raw case content before validation. Useful for building cases in code.
#[derive(Debug, Clone, Default)]
pub struct CaseParts {
    pub reference_bus: Option<i64>,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub res_units: Vec<ResUnit>,
}

impl GridCase {
    /// Sorts entities, validates, and builds the case.
    pub fn from_parts(parts: CaseParts) -> Result<GridCase, CaseError> {
        let report = validate_parts(&parts);
        if !report.is_empty() {
            return Err(CaseError::Invalid(report));
        }
        let CaseParts {
            reference_bus,
            mut buses,
            lines,
            mut generators,
            mut res_units,
        } = parts;
        buses.sort_by_key(|b| b.id);
        generators.sort_by_key(|g| g.bus);
        res_units.sort_by_key(|r| r.bus);
        let bus_pos = buses.iter().enumerate().map(|(k, b)| (b.id, k)).collect();
        Ok(GridCase {
            reference_bus: reference_bus.expect("validated"),
            buses,
            lines,
            generators,
            res_units,
            res_scale: 1.0,
            bus_pos,
        })
    }

    pub fn to_parts(&self) -> CaseParts {
        let eff = self.effective();
        CaseParts {
            reference_bus: Some(eff.reference_bus),
            buses: eff.buses,
            lines: eff.lines,
            generators: eff.generators,
            res_units: eff.res_units,
        }
    }

    pub fn from_json_str(text: &str) -> Result<GridCase, CaseError> {
        let file: CaseFile = serde_json::from_str(text).map_err(|e| CaseError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.version != CASE_VERSION {
            return Err(CaseError::Version(file.version));
        }
        GridCase::from_parts(CaseParts {
            reference_bus: file.reference_bus,
            buses: file.buses,
            lines: file.lines,
            generators: file.generators,
            res_units: file.res,
        })
    }

    pub fn to_json_string(&self) -> String {
        let eff = self.effective();
        let file = CaseFile {
            version: CASE_VERSION,
            reference_bus: Some(eff.reference_bus),
            buses: eff.buses,
            lines: eff.lines,
            generators: eff.generators,
            res: eff.res_units,
        };
        serde_json::to_string_pretty(&file).expect("case serializes")
    }

    /// Same case with `res_scale` folded into the RES data.
    pub fn effective(&self) -> GridCase {
        let mut c = self.clone();
        for r in &mut c.res_units {
            r.forecast *= self.res_scale;
            r.sigma *= self.res_scale;
        }
        c.res_scale = 1.0;
        c
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.bus_pos.get(&id).copied()
    }

    pub fn reference_index(&self) -> usize {
        self.bus_pos[&self.reference_bus]
    }

    pub fn generator_at(&self, bus: i64) -> Option<usize> {
        self.generators.iter().position(|g| g.bus == bus)
    }

    pub fn res_at(&self, bus: i64) -> Option<usize> {
        self.res_units.iter().position(|r| r.bus == bus)
    }

    /// Effective forecast of RES unit `k`.
    pub fn forecast(&self, k: usize) -> f64 {
        self.res_units[k].forecast * self.res_scale
    }

    /// Effective forecast-error standard deviation of RES unit `k`.
    pub fn sigma(&self, k: usize) -> f64 {
        self.res_units[k].sigma * self.res_scale
    }

    pub fn total_demand(&self) -> f64 {
        self.buses.iter().map(|b| b.demand).sum()
    }

    pub fn total_forecast(&self) -> f64 {
        (0..self.res_units.len()).map(|k| self.forecast(k)).sum()
    }

    /// Indices of generators with `p_max > p_min`.
    pub fn providers(&self) -> Vec<usize> {
        (0..self.generators.len())
            .filter(|&i| self.generators[i].is_provider())
            .collect()
    }

    /// Display name of line `l`: `from-to`, with `#n` for parallel circuits.
    pub fn line_name(&self, l: usize) -> String {
        let line = &self.lines[l];
        let dup = self.lines[..l]
            .iter()
            .filter(|o| o.from == line.from && o.to == line.to)
            .count();
        if dup == 0 {
            format!("{}-{}", line.from, line.to)
        } else {
            format!("{}-{}#{}", line.from, line.to, dup + 1)
        }
    }

    /// Whether all buses remain connected when the masked lines are removed.
    pub fn is_connected_without(&self, line_out: &[bool]) -> bool {
        let n = self.buses.len();
        if n == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); n];
        for (l, line) in self.lines.iter().enumerate() {
            if line_out.get(l).copied().unwrap_or(false) {
                continue;
            }
            let a = self.bus_pos[&line.from];
            let b = self.bus_pos[&line.to];
            adj[a].push(b);
            adj[b].push(a);
        }
        reachable(&adj, 0).iter().all(|&r| r)
    }

    /// Copy with the demand at `bus` replaced.
    pub fn with_demand_at(&self, bus: i64, demand: f64) -> GridCase {
        let mut c = self.clone();
        if let Some(k) = c.bus_index(bus) {
            c.buses[k].demand = demand;
        }
        c
    }
}

fn reachable(adj: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::new();
    seen[start] = true;
    queue.push_back(start);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen
}

pub fn load_case(path: impl AsRef<Path>) -> Result<GridCase, CaseError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CaseError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    GridCase::from_json_str(&text)
}

pub fn write_case(case: &GridCase, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, case.to_json_string())
}

/// Multiplies every RES forecast and sigma by `factor`.
pub fn scale_res(case: &GridCase, factor: f64) -> Result<GridCase, CaseError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(CaseError::ScaleFactor(factor));
    }
    let mut c = case.clone();
    c.res_scale *= factor;
    Ok(c)
}

pub fn validate_case(case: &GridCase) -> ValidationReport {
    validate_parts(&case.to_parts())
}

fn validate_parts(parts: &CaseParts) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let mut ids = BTreeSet::new();
    for b in &parts.buses {
        if !ids.insert(b.id) {
            rep.push(format!("bus {}", b.id), "duplicate bus id");
        }
        if !(b.demand >= 0.0) || !b.demand.is_finite() {
            rep.push(format!("bus {}", b.id), "demand must be finite and non-negative");
        }
    }
    if parts.buses.is_empty() {
        rep.push("", "case has no buses");
    }
    match parts.reference_bus {
        None => rep.push("", "no reference bus"),
        Some(r) if !ids.contains(&r) => rep.push(format!("bus {r}"), "no reference bus"),
        _ => {}
    }
    for (l, line) in parts.lines.iter().enumerate() {
        let name = format!("line {} ({}-{})", l, line.from, line.to);
        if line.from == line.to {
            rep.push(&name, "line endpoints coincide");
        }
        for end in [line.from, line.to] {
            if !ids.contains(&end) {
                rep.push(&name, format!("unknown bus {end}"));
            }
        }
        if !(line.x > 0.0) || !line.x.is_finite() {
            rep.push(&name, "reactance must be positive");
        }
        if !(line.f_max > 0.0) {
            rep.push(&name, "capacity must be positive");
        }
    }
    let mut gen_buses = BTreeSet::new();
    for g in &parts.generators {
        let name = format!("generator {}", g.bus);
        if !ids.contains(&g.bus) {
            rep.push(&name, format!("unknown bus {}", g.bus));
        }
        if !gen_buses.insert(g.bus) {
            rep.push(&name, "more than one generator at bus");
        }
        if !(g.c2 > 0.0) {
            rep.push(&name, "non-strictly-convex cost, dual price formulas undefined");
        }
        if !(g.c1.is_finite() && g.c0.is_finite()) {
            rep.push(&name, "cost coefficients must be finite");
        }
        if !(g.p_min <= g.p_max) || !g.p_max.is_finite() || !g.p_min.is_finite() {
            rep.push(&name, "p_min exceeds p_max");
        }
        if !(g.c_up >= 0.0) || !(g.c_dw >= 0.0) {
            rep.push(&name, "reserve costs must be non-negative");
        }
    }
    let mut res_buses = BTreeSet::new();
    for r in &parts.res_units {
        let name = format!("res {}", r.bus);
        if !ids.contains(&r.bus) {
            rep.push(&name, format!("unknown bus {}", r.bus));
        }
        if !res_buses.insert(r.bus) {
            rep.push(&name, "more than one RES unit at bus");
        }
        if !(r.forecast >= 0.0) || !r.forecast.is_finite() {
            rep.push(&name, "forecast must be non-negative");
        }
        if !(r.sigma >= 0.0) || !r.sigma.is_finite() {
            rep.push(&name, "sigma must be non-negative");
        }
    }
    // Connectivity from the reference bus (or the first bus).
    let order: Vec<i64> = ids.iter().copied().collect();
    if !order.is_empty() {
        let pos: BTreeMap<i64, usize> = order.iter().enumerate().map(|(k, &b)| (b, k)).collect();
        let mut adj = vec![Vec::new(); order.len()];
        for line in &parts.lines {
            if let (Some(&a), Some(&b)) = (pos.get(&line.from), pos.get(&line.to)) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let start = parts
            .reference_bus
            .and_then(|r| pos.get(&r).copied())
            .unwrap_or(0);
        let seen = reachable(&adj, start);
        for (k, &s) in seen.iter().enumerate() {
            if !s {
                rep.push("", format!("unreachable bus {}", order[k]));
            }
        }
    }
    rep
}
