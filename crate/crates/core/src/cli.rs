//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or internal error, 2 infeasible
//! clearing (no result file), 3 convexification gap not reached within
//! `--max-iter` (result file written).

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::conic::{SolveOptions, SolveStatus};
use crate::grid::{load_case, scale_res, GridCase};
use crate::market::{clear, MarketError};
use crate::mccormick::{self, ConvexStatus, ConvexifiedResult};
use crate::output::{self, SweepRow, SCHEMA_VERSION};
use crate::pricing::{self, PricedClearing, PricingError};
use crate::security::{self, ContingencySet, OutageClasses, ScMode, SecurityError};
use crate::uncertainty::{assemble_for_case, BalancingPolicy, UncertaintyModel};
use crate::validation::{self, DEFAULT_SAMPLES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_GAP: i32 = 3;

/// Relative tolerance of the closed-form versus dual price check.
pub const PRICE_CHECK_TOL: f64 = 1e-5;
/// Relative step of the finite-difference price oracle.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "ccmarket", version, about = "Chance-constrained market clearing and reserve pricing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Clear one policy and write result.json.
    Solve,
    /// Clear every scale × policy cell and write sweep.csv.
    Sweep,
    /// Security-constrained clearing, writes scopf.json.
    Scopf,
    /// Monte-Carlo violation rates and KKT audit, writes violations.json.
    Validate,
    /// Prices with dual and finite-difference checks, writes prices.json.
    Prices,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Solve => "solve",
            Command::Sweep => "sweep",
            Command::Scopf => "scopf",
            Command::Validate => "validate",
            Command::Prices => "prices",
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Case file (JSON).
    #[arg(long, global = true)]
    pub case: Option<PathBuf>,
    /// Balancing policies, comma separated: det, sw-sb, n2n-sb, sw-ab, n2n-ab.
    #[arg(long, global = true, value_delimiter = ',', default_value = "sw-sb")]
    pub policy: Vec<String>,
    #[arg(long, global = true, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Solver tolerance.
    #[arg(long, global = true, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, global = true, default_value_t = mccormick::DEFAULT_SHRINK)]
    pub shrink: f64,
    /// Convexification gap target, percent.
    #[arg(long, global = true, default_value_t = mccormick::DEFAULT_GAP_TOL)]
    pub gap_tol: f64,
    #[arg(long, global = true, default_value_t = mccormick::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// RES scale factors for sweep, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub scales: Vec<f64>,
    /// Contingency file or one of n1-lines, n1-gens, n1-all.
    #[arg(long, global = true, default_value = "n1-lines")]
    pub contingencies: String,
    #[arg(long, global = true, value_enum, default_value_t = ScMode::Corrective)]
    pub mode: ScMode,
    #[arg(long, global = true, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Concurrent sweep cells; defaults to the number of cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContingencySpec {
    File(PathBuf),
    N1(OutageClasses),
}

impl ContingencySpec {
    pub fn parse(s: &str) -> Self {
        match s {
            "n1-lines" => ContingencySpec::N1(OutageClasses::LINES),
            "n1-gens" => ContingencySpec::N1(OutageClasses::GENS),
            "n1-all" => ContingencySpec::N1(OutageClasses::ALL),
            path => ContingencySpec::File(PathBuf::from(path)),
        }
    }
}

/// Validated settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub case: PathBuf,
    pub policies: Vec<BalancingPolicy>,
    pub epsilon: f64,
    pub tol: f64,
    pub shrink: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
    pub scales: Vec<f64>,
    pub contingencies: ContingencySpec,
    pub mode: ScMode,
    pub samples: usize,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub out: PathBuf,
}

/// A rejected setting.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("--{field}: {message}")]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

fn reject<T>(field: &'static str, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { field, message: message.into() })
}

impl RunConfig {
    pub fn from_args(command: Command, a: &GlobalArgs) -> Result<Self, ConfigError> {
        let Some(case) = a.case.clone() else {
            return reject("case", "a case file is required");
        };
        let mut policies = Vec::new();
        for p in &a.policy {
            match p.trim().parse::<BalancingPolicy>() {
                Ok(p) if !policies.contains(&p) => policies.push(p),
                Ok(_) => {}
                Err(_) => return reject("policy", format!("unknown policy {p:?}")),
            }
        }
        if policies.is_empty() {
            return reject("policy", "no policy given");
        }
        if command != Command::Sweep && policies.len() > 1 {
            return reject("policy", format!("{command} takes a single policy"));
        }
        if command == Command::Scopf && policies[0] != BalancingPolicy::SwSb {
            return reject("policy", "scopf clears with sw-sb balancing");
        }
        if !(a.epsilon > 0.0 && a.epsilon <= 0.5) {
            return reject("epsilon", format!("{} not in (0, 0.5]", a.epsilon));
        }
        if !(a.tol > 0.0 && a.tol.is_finite()) {
            return reject("tol", format!("{} is not a positive tolerance", a.tol));
        }
        if !(a.shrink > 0.0 && a.shrink < 1.0) {
            return reject("shrink", format!("{} not in (0, 1)", a.shrink));
        }
        if !(a.gap_tol > 0.0 && a.gap_tol.is_finite()) {
            return reject("gap-tol", format!("{} is not a positive percentage", a.gap_tol));
        }
        if a.max_iter == 0 {
            return reject("max-iter", "at least one iteration is needed");
        }
        if let Some(s) = a.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return reject("scales", format!("scale {s} is not positive"));
        }
        if command == Command::Sweep && a.scales.is_empty() {
            return reject("scales", "sweep needs at least one scale");
        }
        if a.samples == 0 {
            return reject("samples", "at least one sample is needed");
        }
        let seed = match (command, a.seed) {
            (_, Some(s)) => s,
            (Command::Validate, None) => return reject("seed", "validate needs an explicit seed"),
            (_, None) => 0,
        };
        if a.jobs == Some(0) {
            return reject("jobs", "at least one job is needed");
        }
        Ok(RunConfig {
            command,
            case,
            policies,
            epsilon: a.epsilon,
            tol: a.tol,
            shrink: a.shrink,
            gap_tol: a.gap_tol,
            max_iter: a.max_iter,
            scales: a.scales.clone(),
            contingencies: ContingencySpec::parse(&a.contingencies),
            mode: a.mode,
            samples: a.samples,
            seed,
            jobs: a.jobs,
            out: a.out.clone(),
        })
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions { tol: self.tol, ..SolveOptions::default() }
    }

    fn policy(&self) -> BalancingPolicy {
        self.policies[0]
    }

    fn case_name(&self) -> String {
        self.case.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Failure of a command, carrying its exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("clearing is {0}")]
    Infeasible(SolveStatus),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            _ => EXIT_ERROR,
        }
    }
}

fn failed(e: impl fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

impl From<MarketError> for CliError {
    fn from(e: MarketError) -> Self {
        match e {
            MarketError::NotOptimal(s @ SolveStatus::Infeasible) => CliError::Infeasible(s),
            e => failed(e),
        }
    }
}

impl From<PricingError> for CliError {
    fn from(e: PricingError) -> Self {
        match e {
            PricingError::Market(m) => m.into(),
            e => failed(e),
        }
    }
}

impl From<SecurityError> for CliError {
    fn from(e: SecurityError) -> Self {
        match e {
            SecurityError::NotOptimal(s @ SolveStatus::Infeasible) => CliError::Infeasible(s),
            e => failed(e),
        }
    }
}

impl From<output::OutputError> for CliError {
    fn from(e: output::OutputError) -> Self {
        failed(e)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to standard error.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match RunConfig::from_args(cli.command, &cli.global).map_err(CliError::from).and_then(|c| execute(&c)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Runs a validated configuration. `Ok` carries 0 or [`EXIT_GAP`].
pub fn execute(cfg: &RunConfig) -> Result<i32, CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| failed(format!("{}: {e}", cfg.out.display())))?;
    let case = load_case(&cfg.case).map_err(|e| failed(format!("{}: {e}", cfg.case.display())))?;
    let start = Instant::now();
    let code = match cfg.command {
        Command::Solve => cmd_solve(cfg, &case)?,
        Command::Sweep => cmd_sweep(cfg, &case)?,
        Command::Scopf => cmd_scopf(cfg, &case)?,
        Command::Validate => cmd_validate(cfg, &case)?,
        Command::Prices => cmd_prices(cfg, &case)?,
    };
    log::info!("{} finished in {:.2?}", cfg.command, start.elapsed());
    Ok(code)
}

fn uncertainty(policy: BalancingPolicy, case: &GridCase, epsilon: f64) -> Result<UncertaintyModel, CliError> {
    assemble_for_case(policy, case, None).and_then(|u| u.with_epsilon(epsilon)).map_err(failed)
}

fn priced(
    policy: BalancingPolicy,
    case: &GridCase,
    unc: &UncertaintyModel,
    opts: &SolveOptions,
) -> Result<PricedClearing, CliError> {
    let c = clear(policy, case, unc, opts)?;
    Ok(pricing::price_clearing(case, unc, c)?)
}

fn convexify(cfg: &RunConfig, policy: BalancingPolicy, case: &GridCase, unc: &UncertaintyModel) -> Result<Option<ConvexifiedResult>, CliError> {
    if !policy.is_asymmetric() {
        return Ok(None);
    }
    mccormick::solve_sequential(policy, case, unc, cfg.shrink, cfg.gap_tol, cfg.max_iter, &cfg.solve_options())
        .map(Some)
        .map_err(|e| match e {
            mccormick::McCormickError::FirstSolve(s @ SolveStatus::Infeasible) => CliError::Infeasible(s),
            e => failed(e),
        })
}

fn res_marginal(policy: BalancingPolicy, case: &GridCase, unc: &UncertaintyModel, pc: &PricedClearing) -> Option<Vec<pricing::ResMarginal>> {
    if policy != BalancingPolicy::N2nSb {
        return None;
    }
    match pricing::res_marginal_cost(case, unc, &pc.clearing.dispatch, &pc.prices) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("RES marginal cost skipped: {e}");
            None
        }
    }
}

fn write_price_tables(out: &Path, case: &GridCase, pc: &PricedClearing, marginal: Option<&[pricing::ResMarginal]>) -> Result<(), CliError> {
    output::write_csv(&out.join("bus_prices.csv"), &output::bus_price_rows(case, &pc.prices, &pc.closed_form))?;
    let rows = output::res_price_rows(case, &pc.prices, &pc.settlement.res_balancing_cost, marginal);
    output::write_csv(&out.join("res_prices.csv"), &rows)?;
    Ok(())
}

pub fn cmd_solve(cfg: &RunConfig, case: &GridCase) -> Result<i32, CliError> {
    let policy = cfg.policy();
    let unc = uncertainty(policy, case, cfg.epsilon)?;
    let pc = priced(policy, case, &unc, &cfg.solve_options())?;
    let check = pricing::check_against_duals(&pc.closed_form, case, &pc.clearing.solution, PRICE_CHECK_TOL)?;
    if !check.passed() {
        log::warn!("{} closed-form prices differ from the duals (max rel. error {:.3e})", check.failures.len(), check.max_rel_error);
    }
    // the clearing itself is exact; a failed relaxation only leaves the gap unmet
    let convex = match convexify(cfg, policy, case, &unc) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("convexification failed: {e}");
            None
        }
    };
    let gap_unmet = policy.is_asymmetric() && convex.as_ref().map_or(true, |c| c.status != ConvexStatus::Converged);
    let marginal = res_marginal(policy, case, &unc, &pc);
    let doc = output::SolveDoc {
        version: SCHEMA_VERSION,
        case: cfg.case_name(),
        policy,
        epsilon: cfg.epsilon,
        objective: pc.clearing.solution.objective,
        dispatch: pc.clearing.dispatch.clone(),
        prices: pc.prices.clone(),
        closed_form: pc.closed_form.clone(),
        price_check: check,
        settlement: pc.settlement.clone(),
        res_marginal: marginal.clone(),
        convexification: convex.as_ref().map(|c| output::ConvexSummary::new(c, cfg.gap_tol)),
    };
    output::write_json(&cfg.out.join("result.json"), &doc)?;
    write_price_tables(&cfg.out, case, &pc, marginal.as_deref())?;
    if let Some(c) = &convex {
        output::write_csv(&cfg.out.join("trace.csv"), &output::rounded_trace(&c.trace))?;
        if c.status != ConvexStatus::Converged {
            eprintln!("convexification gap {:.4e}% above --gap-tol {}% ({:?})", c.gap_percent, cfg.gap_tol, c.status);
        }
    }
    Ok(if gap_unmet { EXIT_GAP } else { EXIT_OK })
}

fn sweep_cell(cfg: &RunConfig, case: &GridCase, scale: f64, policy: BalancingPolicy) -> Result<(SweepRow, f64), String> {
    let scaled = scale_res(case, scale).map_err(|e| e.to_string())?;
    let unc = uncertainty(policy, &scaled, cfg.epsilon).map_err(|e| e.to_string())?;
    let pc = priced(policy, &scaled, &unc, &cfg.solve_options()).map_err(|e| e.to_string())?;
    let (convex, note) = match convexify(cfg, policy, &scaled, &unc) {
        Ok(c) => (c, None),
        Err(e) => (None, Some(format!("convexification: {e}"))),
    };
    let s = &pc.settlement;
    let row = SweepRow {
        scale,
        policy,
        status: "optimal".into(),
        objective: Some(pc.clearing.solution.objective),
        consumer_payment: Some(s.consumer_payment),
        res_payment: Some(s.res_payment),
        gen_profit: Some(s.gen_profit.iter().sum()),
        adequacy_gap: Some(s.adequacy_gap),
        congestion_rent: Some(s.congestion_rent),
        delta_consumer_payment_percent: None,
        convex_gap_percent: convex.map(|c| c.gap_percent),
        error: note,
    };
    Ok((row, s.consumer_payment))
}

fn failed_row(scale: f64, policy: BalancingPolicy, error: String) -> SweepRow {
    SweepRow {
        scale,
        policy,
        status: "failed".into(),
        objective: None,
        consumer_payment: None,
        res_payment: None,
        gen_profit: None,
        adequacy_gap: None,
        congestion_rent: None,
        delta_consumer_payment_percent: None,
        convex_gap_percent: None,
        error: Some(error),
    }
}

/// Clears every scale × policy cell. ΔλD is relative to SW-SB at the same
/// scale, which is cleared as a baseline even when not requested.
pub fn sweep(cfg: &RunConfig, case: &GridCase) -> Result<Vec<SweepRow>, CliError> {
    let mut cells: Vec<(f64, BalancingPolicy)> = Vec::new();
    for &s in &cfg.scales {
        for &p in &cfg.policies {
            cells.push((s, p));
        }
        if !cfg.policies.contains(&BalancingPolicy::SwSb) {
            cells.push((s, BalancingPolicy::SwSb));
        }
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cfg.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(failed)?;
    let results: Vec<Result<(SweepRow, f64), String>> =
        pool.install(|| cells.par_iter().map(|&(s, p)| sweep_cell(cfg, case, s, p)).collect());
    let mut rows = Vec::new();
    for (k, &(s, p)) in cells.iter().enumerate() {
        if !cfg.policies.contains(&p) {
            continue;
        }
        let baseline = cells
            .iter()
            .zip(&results)
            .find(|((bs, bp), _)| *bs == s && *bp == BalancingPolicy::SwSb)
            .and_then(|(_, r)| r.as_ref().ok().map(|r| r.1));
        rows.push(match &results[k] {
            Ok((row, ld)) => {
                let mut row = row.clone();
                row.delta_consumer_payment_percent = baseline.filter(|b| *b != 0.0).map(|b| 100.0 * (ld - b) / b);
                row
            }
            Err(e) => {
                log::warn!("sweep cell scale {s} policy {p} failed: {e}");
                failed_row(s, p, e.clone())
            }
        });
    }
    Ok(rows)
}

pub fn cmd_sweep(cfg: &RunConfig, case: &GridCase) -> Result<i32, CliError> {
    let rows = sweep(cfg, case)?;
    let rounded: Vec<SweepRow> = rows.into_iter().map(round_sweep_row).collect();
    output::write_csv(&cfg.out.join("sweep.csv"), &rounded)?;
    Ok(EXIT_OK)
}

fn round_sweep_row(r: SweepRow) -> SweepRow {
    let o = |x: Option<f64>| x.map(output::round_sig);
    SweepRow {
        objective: o(r.objective),
        consumer_payment: o(r.consumer_payment),
        res_payment: o(r.res_payment),
        gen_profit: o(r.gen_profit),
        adequacy_gap: o(r.adequacy_gap),
        congestion_rent: o(r.congestion_rent),
        delta_consumer_payment_percent: o(r.delta_consumer_payment_percent),
        convex_gap_percent: o(r.convex_gap_percent),
        ..r
    }
}

pub fn contingency_set(cfg: &RunConfig, case: &GridCase) -> Result<ContingencySet, CliError> {
    match &cfg.contingencies {
        ContingencySpec::N1(classes) => Ok(security::enumerate_n1(case, *classes, cfg.mode)),
        ContingencySpec::File(path) => Ok(ContingencySet::read_json(case, &path.to_string_lossy(), cfg.mode)?),
    }
}

pub fn cmd_scopf(cfg: &RunConfig, case: &GridCase) -> Result<i32, CliError> {
    let unc = uncertainty(BalancingPolicy::SwSb, case, cfg.epsilon)?;
    let set = contingency_set(cfg, case)?;
    log::info!("{} contingencies, {} mode", set.num_contingencies(), set.mode);
    let res = security::solve_scopf(case, &unc, &set, &cfg.solve_options())?;
    let bad = security::state_violations(case, &set, &res, |b| unc.z(b), 1e-5);
    for v in &bad {
        log::warn!("state check: {v}");
    }
    output::write_csv(&cfg.out.join("scopf_prices.csv"), &output::scopf_price_rows(case, &res))?;
    let doc = output::ScopfDoc {
        version: SCHEMA_VERSION,
        case: cfg.case_name(),
        mode: cfg.mode,
        epsilon: cfg.epsilon,
        result: res,
    };
    output::write_json(&cfg.out.join("scopf.json"), &doc)?;
    Ok(EXIT_OK)
}

pub fn cmd_validate(cfg: &RunConfig, case: &GridCase) -> Result<i32, CliError> {
    let policy = cfg.policy();
    let unc = uncertainty(policy, case, cfg.epsilon)?;
    let c = clear(policy, case, &unc, &cfg.solve_options())?;
    let violations = validation::monte_carlo(case, &c.dispatch, &unc, cfg.samples, cfg.seed).map_err(failed)?;
    if !violations.within_targets() {
        log::warn!("empirical violation rate {:.4} above target", violations.max_rate());
    }
    let kkt = validation::kkt_audit(&c.model.program, &c.solution);
    let doc = output::ValidateDoc {
        version: SCHEMA_VERSION,
        case: cfg.case_name(),
        policy,
        epsilon: cfg.epsilon,
        violations,
        kkt: output::KktSummary::new(&kkt, 10),
    };
    output::write_json(&cfg.out.join("violations.json"), &doc)?;
    Ok(EXIT_OK)
}

pub fn cmd_prices(cfg: &RunConfig, case: &GridCase) -> Result<i32, CliError> {
    let policy = cfg.policy();
    let unc = uncertainty(policy, case, cfg.epsilon)?;
    let opts = cfg.solve_options();
    let pc = priced(policy, case, &unc, &opts)?;
    let check = pricing::check_against_duals(&pc.closed_form, case, &pc.clearing.solution, PRICE_CHECK_TOL)?;
    let targets = validation::default_targets(case, &unc);
    let fd = validation::price_fd_oracle(policy, case, &unc, &targets, FD_STEP, &opts).map_err(failed)?;
    let marginal = res_marginal(policy, case, &unc, &pc);
    write_price_tables(&cfg.out, case, &pc, marginal.as_deref())?;
    let doc = output::PricesDoc {
        version: SCHEMA_VERSION,
        case: cfg.case_name(),
        policy,
        epsilon: cfg.epsilon,
        prices: pc.prices,
        closed_form: pc.closed_form,
        price_check: check,
        finite_differences: fd,
        settlement: pc.settlement,
    };
    output::write_json(&cfg.out.join("prices.json"), &doc)?;
    Ok(EXIT_OK)
}
