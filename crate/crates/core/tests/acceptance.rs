//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness. The process fails when the set of
//! failing criteria differs from `EXPECTED_FAILURES`, so a regression or an
//! unexpected pass both turn the target red while the known failure stays
//! visible in the report.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ccmarket::cli::{sweep, Command, ContingencySpec, RunConfig};
use ccmarket::grid::{load_case, scale_res, Generator, GridCase};
use ccmarket::market::{clear, expected_cost};
use ccmarket::mccormick::{solve_sequential, ConvexStatus, McCormickError};
use ccmarket::pricing::{self, beta, best_response, check_against_duals, price_clearing, PricedClearing};
use ccmarket::security::{enumerate_n1, solve_scopf, ContingencySet, OutageClasses, ScMode};
use ccmarket::uncertainty::{assemble_for_case, chebyshev_z, UncertaintyModel};
use ccmarket::validation::{default_targets, monte_carlo, price_fd_oracle};
use ccmarket::{BalancingPolicy, SolveOptions};

/// Revenue adequacy with a near-equality bound cannot hold on congested
/// clearings: the surplus λD − λW − ΣΠ equals the congestion rent.
const EXPECTED_FAILURES: &[u32] = &[7];

const CASES: [&str; 4] = ["triangle3", "case5_scopf", "case10", "ieee118_wind"];
const STOCHASTIC: [BalancingPolicy; 4] =
    [BalancingPolicy::SwSb, BalancingPolicy::N2nSb, BalancingPolicy::SwAb, BalancingPolicy::N2nAb];

fn data(name: &str) -> GridCase {
    load_case(format!("{}/data/{name}.json", env!("CARGO_MANIFEST_DIR"))).expect("bundled case")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn priced(policy: BalancingPolicy, case: &GridCase) -> Result<(UncertaintyModel, PricedClearing), String> {
    let unc = assemble_for_case(policy, case, None).map_err(|e| e.to_string())?;
    priced_with(policy, case, unc)
}

fn priced_with(policy: BalancingPolicy, case: &GridCase, unc: UncertaintyModel) -> Result<(UncertaintyModel, PricedClearing), String> {
    let c = clear(policy, case, &unc, &SolveOptions::default()).map_err(|e| e.to_string())?;
    let pc = price_clearing(case, &unc, c).map_err(|e| e.to_string())?;
    Ok((unc, pc))
}

/// Every bundled case at RES scales 1 and 4.
fn family() -> Vec<(String, GridCase)> {
    let mut out = Vec::new();
    for name in CASES {
        let base = data(name);
        for s in [1.0, 4.0] {
            out.push((format!("{name} x{s}"), scale_res(&base, s).unwrap()));
        }
    }
    out
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail })
}

fn c1_chebyshev() -> Result<Outcome, String> {
    let z = chebyshev_z(0.01).map_err(|e| e.to_string())?;
    outcome((z - 9.9499).abs() <= 0.005, format!("z(0.01) = {z:.6}"))
}

fn c2_policy_equivalence() -> Result<Outcome, String> {
    let mut worst: f64 = 0.0;
    for name in ["case10", "ieee118_wind"] {
        let case = data(name);
        let (_, sw) = priced(BalancingPolicy::SwSb, &case)?;
        let (_, n2n) = priced(BalancingPolicy::N2nSb, &case)?;
        worst = worst.max(rel(sw.clearing.solution.objective, n2n.clearing.solution.objective));
    }
    outcome(worst <= 1e-6, format!("max relative objective difference {worst:.2e}"))
}

fn c3_price_aggregation() -> Result<Outcome, String> {
    let mut worst: f64 = 0.0;
    for (label, case) in family() {
        if case.res_units.is_empty() {
            continue;
        }
        let (_, sw) = priced(BalancingPolicy::SwSb, &case)?;
        let (_, n2n) = priced(BalancingPolicy::N2nSb, &case)?;
        let chi = sw.prices.chi[0];
        let sum: f64 = n2n.prices.chi.iter().sum();
        let r = rel(sum, chi);
        if r > 1e-6 {
            println!("      {label}: Σχ_u = {sum}, χ = {chi}");
        }
        worst = worst.max(r);
    }
    // shares of the 118-bus case against the published nodal prices
    let chi_pub = [0.4, 2.822, 2.102, 2.634, 2.036, 1.539, 0.862, 8.258, 1.307, 0.749, 0.205];
    let total: f64 = chi_pub.iter().sum();
    let case = data("ieee118_wind");
    let unc = assemble_for_case(BalancingPolicy::N2nSb, &case, None).map_err(|e| e.to_string())?;
    let b = beta(&unc.nodal_cov).map_err(|e| e.to_string())?;
    let share_err = b.iter().zip(chi_pub).map(|(b, c)| (b - c / total).abs()).fold(0.0, f64::max);
    let (_, n2n) = priced(BalancingPolicy::N2nSb, &case)?;
    outcome(
        worst <= 1e-6 && share_err <= 5e-3 && n2n.prices.chi.len() == 11,
        format!("max rel |Σχ_u − χ| {worst:.2e}; 118-bus shares vs published {share_err:.2e} abs"),
    )
}

fn random_correlation(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>());
    let s = &b * b.transpose() + DMatrix::identity(n, n) * 0.05;
    let d = DVector::from_fn(n, |i, _| 1.0 / s[(i, i)].sqrt());
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { s[(i, j)] * d[i] * d[j] })
}

fn c4_beta_identity() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let case = data("case10");
    let u = case.res_units.len();
    let (mut sum_err, mut share_err, mut chi_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let draws = 24;
    for _ in 0..draws {
        let corr = random_correlation(&mut rng, u);
        let sw_unc = assemble_for_case(BalancingPolicy::SwSb, &case, Some(&corr)).map_err(|e| e.to_string())?;
        let n2n_unc = assemble_for_case(BalancingPolicy::N2nSb, &case, Some(&corr)).map_err(|e| e.to_string())?;
        let sigma = &n2n_unc.nodal_cov;
        let b = beta(sigma).map_err(|e| e.to_string())?;
        sum_err = sum_err.max((b.iter().sum::<f64>() - 1.0).abs());
        let total: f64 = sigma.iter().sum();
        for (r, bu) in b.iter().enumerate() {
            let row: f64 = (0..u).map(|c| sigma[(r, c)]).sum();
            share_err = share_err.max((bu - row / total).abs());
        }
        let (_, sw) = priced_with(BalancingPolicy::SwSb, &case, sw_unc)?;
        let (_, n2n) = priced_with(BalancingPolicy::N2nSb, &case, n2n_unc)?;
        let chi = sw.prices.chi[0];
        for (bu, cu) in b.iter().zip(&n2n.prices.chi) {
            chi_err = chi_err.max((cu - bu * chi).abs() / chi.abs());
        }
    }
    outcome(
        sum_err <= 1e-12 && share_err <= 1e-12 && chi_err <= 1e-6,
        format!("{draws} covariances: |Σβ − 1| {sum_err:.1e}, share error {share_err:.1e}, |χ_u − β_uχ|/χ {chi_err:.2e}"),
    )
}

fn c5_dual_fidelity() -> Result<Outcome, String> {
    let mut worst_dual: f64 = 0.0;
    let mut checked = 0;
    for (label, case) in family() {
        for policy in STOCHASTIC {
            let (_, pc) = priced(policy, &case)?;
            let rep = check_against_duals(&pc.closed_form, &case, &pc.clearing.solution, 1e-5).map_err(|e| e.to_string())?;
            if !rep.passed() {
                println!("      {label} {policy}: {:?}", rep.failures.first());
            }
            checked += rep.checked;
            worst_dual = worst_dual.max(rep.max_rel_error);
        }
    }
    let mut worst_fd: f64 = 0.0;
    let mut fd_checked = 0;
    for name in ["triangle3", "case5_scopf", "case10"] {
        let case = data(name);
        for policy in STOCHASTIC {
            let unc = assemble_for_case(policy, &case, None).map_err(|e| e.to_string())?;
            let targets = default_targets(&case, &unc);
            let rep = price_fd_oracle(policy, &case, &unc, &targets, 1e-4, &SolveOptions::default())
                .map_err(|e| e.to_string())?;
            fd_checked += rep.num_checked();
            worst_fd = worst_fd.max(rep.max_rel_error());
        }
    }
    outcome(
        worst_dual <= 1e-5 && worst_fd <= 1e-3 && fd_checked > 0,
        format!("{checked} dual checks, max rel {worst_dual:.2e}; {fd_checked} stable FD checks, max rel {worst_fd:.2e}"),
    )
}

fn c6_expected_cost() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws = 12;
    let n = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let k = rng.gen_range(2..=6);
        let g = Generator {
            bus: 1,
            c2: rng.gen_range(0.005..0.5),
            c1: rng.gen_range(5.0..40.0),
            c0: rng.gen_range(0.0..100.0),
            p_max: 1e9,
            p_min: 0.0,
            c_up: 0.0,
            c_dw: 0.0,
        };
        let p = rng.gen_range(20.0..200.0);
        let a: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m: Vec<f64> = (0..k).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let f = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-3.0..3.0));
        let cov = &f * f.transpose();
        let exact = expected_cost(&g, p, &a, &m, &cov).map_err(|e| e.to_string())?;
        let fa = f.transpose() * DVector::from_column_slice(&a);
        let ma: f64 = m.iter().zip(&a).map(|(x, y)| x * y).sum();
        let mut acc = 0.0;
        for _ in 0..n {
            // Ω·A = M·A + (F ξ)·A with ξ standard normal
            let noise: f64 = (0..k).map(|j| fa[j] * rng.sample::<f64, _>(StandardNormal)).sum();
            let x = p - ma - noise;
            acc += g.c2 * x * x + g.c1 * x + g.c0;
        }
        worst = worst.max(rel(acc / n as f64, exact));
    }
    outcome(worst <= 5e-3, format!("{draws} draws of 10^6 samples, max relative error {worst:.2e}"))
}

fn c7_revenue_adequacy() -> Result<Outcome, String> {
    let mut worst = (0.0, String::new());
    let mut rent_err: f64 = 0.0;
    let mut count = 0;
    for (label, case) in family() {
        for policy in BalancingPolicy::ALL {
            let (_, pc) = priced(policy, &case)?;
            let s = &pc.settlement;
            let r = s.adequacy_gap / s.consumer_payment;
            rent_err = rent_err.max((s.adequacy_gap - s.congestion_rent).abs() / s.consumer_payment);
            if r > worst.0 {
                worst = (r, format!("{label} {policy}"));
            }
            count += 1;
        }
    }
    outcome(
        worst.0 <= 1e-5,
        format!(
            "{count} clearings, max (λD − λW − ΣΠ)/λD = {:.2e} on {}; |surplus − congestion rent|/λD ≤ {rent_err:.1e}",
            worst.0, worst.1
        ),
    )
}

fn c8_equilibrium() -> Result<Outcome, String> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (label, case) in family() {
        for policy in STOCHASTIC {
            let (unc, pc) = priced(policy, &case)?;
            for (i, g) in case.generators.iter().enumerate() {
                let lambda = pc.prices.lambda_at(&case, g.bus).ok_or("missing λ")?;
                let br = best_response(g, &unc, lambda, &pc.prices.chi, &SolveOptions::default())
                    .map_err(|e| format!("{label} {policy}: {e}"))?;
                let cleared = pc.settlement.gen_profit[i];
                worst = worst.max((br.profit - cleared) / cleared.abs().max(1.0));
                count += 1;
            }
        }
    }
    outcome(worst <= 1e-5, format!("{count} generators, max relative profit improvement {worst:.2e}"))
}

fn c9_cost_equivalence() -> Result<Outcome, String> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut excluded = Vec::new();
    for (label, case) in family() {
        if case.res_units.is_empty() {
            continue;
        }
        // σ_u = κ_u w_u needs a positive forecast
        if (0..case.res_units.len()).any(|u| case.forecast(u) <= 0.0) {
            excluded.push(label);
            continue;
        }
        let (unc, pc) = priced(BalancingPolicy::N2nSb, &case)?;
        let m = pricing::res_marginal_cost(&case, &unc, &pc.clearing.dispatch, &pc.prices).map_err(|e| e.to_string())?;
        for (u, mu) in m.iter().enumerate() {
            let ca = pc.settlement.res_balancing_cost[u];
            worst = worst.max((mu.total_cost - ca).abs() / ca.abs().max(1e-9));
            count += 1;
        }
    }
    outcome(
        worst <= 1e-6 && count > 0,
        format!("{count} RES units, max relative |C^w − C^α| {worst:.2e}; not applicable (a RES with zero forecast): {excluded:?}"),
    )
}

fn c10_mccormick() -> Result<Outcome, String> {
    let opts = SolveOptions::default();
    let mut violations = 0;
    let mut iterations = 0;
    let mut notes = Vec::new();
    for (label, case) in family() {
        for policy in [BalancingPolicy::SwAb, BalancingPolicy::N2nAb] {
            let unc = assemble_for_case(policy, &case, None).map_err(|e| e.to_string())?;
            match solve_sequential(policy, &case, &unc, 0.5, 0.01, 30, &opts) {
                Ok(r) => {
                    for t in &r.trace {
                        iterations += 1;
                        if t.lower > t.upper + 1e-9 * t.upper.abs().max(1.0) {
                            violations += 1;
                        }
                    }
                }
                Err(McCormickError::FirstSolve(s)) => notes.push(format!("{label} {policy}: first relaxation {s}")),
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    let case = data("ieee118_wind");
    let unc = assemble_for_case(BalancingPolicy::SwAb, &case, None).map_err(|e| e.to_string())?;
    let r = solve_sequential(BalancingPolicy::SwAb, &case, &unc, 0.5, 0.01, 30, &opts).map_err(|e| e.to_string())?;
    for n in &notes {
        println!("      {n}");
    }
    outcome(
        violations == 0 && r.status == ConvexStatus::Converged && r.gap_percent <= 0.01,
        format!(
            "{iterations} iterations, {violations} sandwich violations; 118-bus SW-AB gap {:.2e}% after {} iterations",
            r.gap_percent,
            r.trace.len()
        ),
    )
}

fn c11_violation_rates() -> Result<Outcome, String> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (label, case) in family() {
        for policy in STOCHASTIC {
            let unc = assemble_for_case(policy, &case, None).and_then(|u| u.with_epsilon(0.01)).map_err(|e| e.to_string())?;
            let c = clear(policy, &case, &unc, &SolveOptions::default()).map_err(|e| format!("{label} {policy}: {e}"))?;
            let rep = monte_carlo(&case, &c.dispatch, &unc, 100_000, 11).map_err(|e| e.to_string())?;
            worst = worst.max(rep.max_rate());
            count += rep.generators.len();
        }
    }
    outcome(worst <= 0.01, format!("{count} generator runs at 10^5 samples, max violation rate {worst:.2e}"))
}

fn c12_scopf() -> Result<Outcome, String> {
    let case = data("case5_scopf");
    let opts = SolveOptions::default();
    let unc = assemble_for_case(BalancingPolicy::SwSb, &case, None).map_err(|e| e.to_string())?;
    let mut msgs = Vec::new();

    let pre = solve_scopf(&case, &unc, &enumerate_n1(&case, OutageClasses::LINES, ScMode::Preventive), &opts)
        .map_err(|e| e.to_string())?;
    let zero_r = pre.r_up.iter().chain(&pre.r_dw).all(|&r| r == 0.0);
    let base = &pre.states[0];
    let same_p = pre.states.iter().all(|s| s.p == base.p);
    if !(zero_r && same_p) {
        msgs.push("preventive structure".to_string());
    }

    let k0 = solve_scopf(&case, &unc, &ContingencySet::base_only(&case, ScMode::Corrective), &opts).map_err(|e| e.to_string())?;
    let opf = clear(BalancingPolicy::SwSb, &case, &unc, &opts).map_err(|e| e.to_string())?;
    let collapse = rel(k0.objective, opf.solution.objective);
    let sc_zero = k0.prices.pi_sc.iter().map(|x| x.abs()).fold(0.0, f64::max);

    let cor = solve_scopf(&case, &unc, &enumerate_n1(&case, OutageClasses::ALL, ScMode::Corrective), &opts)
        .map_err(|e| e.to_string())?;
    let p = &cor.prices;
    let mut decomp: f64 = 0.0;
    let mut reserve: f64 = 0.0;
    for (i, g) in case.generators.iter().enumerate() {
        let rho: f64 = cor.states[1..].iter().map(|s| s.rho_dn[i] - s.rho_up[i]).sum();
        decomp = decomp.max((p.pi_p_sc[i] - (p.pi_p[i] + rho)).abs()).max((p.pi_p_sc[i] - p.lambda_base[i]).abs());
        let up_free = cor.states[1..].iter().all(|s| s.rho_up[i].abs() <= 1e-9);
        if let (true, Some(pu)) = (up_free, &p.pi_up) {
            reserve = reserve.max((pu[i] - g.c_up).abs());
        }
        let dw_free = cor.states[1..].iter().all(|s| s.rho_dn[i].abs() <= 1e-9);
        if let (true, Some(pd)) = (dw_free, &p.pi_dw) {
            reserve = reserve.max((pd[i] - g.c_dw).abs());
        }
    }
    outcome(
        msgs.is_empty() && collapse <= 1e-6 && sc_zero <= 1e-9 && decomp <= 1e-6 && reserve <= 1e-6,
        format!(
            "preventive r = 0 {zero_r}, p^k = p^0 {same_p}; K = 0 objective rel {collapse:.1e}, |π^sc| {sc_zero:.1e}; \
             decomposition {decomp:.1e}; non-binding reserve price error {reserve:.1e}"
        ),
    )
}

fn sweep_rows(name: &str) -> Result<Vec<ccmarket::output::SweepRow>, String> {
    let cfg = RunConfig {
        command: Command::Sweep,
        case: format!("{name}.json").into(),
        policies: vec![BalancingPolicy::SwSb, BalancingPolicy::SwAb],
        epsilon: 0.01,
        tol: 1e-8,
        shrink: 0.5,
        gap_tol: 0.01,
        max_iter: 30,
        scales: vec![0.5, 1.0, 2.0, 4.0],
        contingencies: ContingencySpec::N1(OutageClasses::LINES),
        mode: ScMode::Corrective,
        samples: 1,
        seed: 0,
        jobs: None,
        out: ".".into(),
    };
    sweep(&cfg, &data(name)).map_err(|e| e.to_string())
}

fn max_delta(rows: &[ccmarket::output::SweepRow]) -> f64 {
    rows.iter()
        .filter(|r| r.policy == BalancingPolicy::SwAb)
        .map(|r| r.delta_consumer_payment_percent.unwrap_or(f64::NAN))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The penetration family is the 118-bus case scaled; the small cases are
/// reported for information.
fn c13_qualitative() -> Result<Outcome, String> {
    let rows = sweep_rows("ieee118_wind")?;
    let mut bad = Vec::new();
    for policy in [BalancingPolicy::SwSb, BalancingPolicy::SwAb] {
        let obj: Vec<f64> = rows.iter().filter(|r| r.policy == policy).map(|r| r.objective.unwrap_or(f64::NAN)).collect();
        if !obj.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)) {
            bad.push(format!("{policy} objective not decreasing: {obj:?}"));
        }
    }
    let delta = max_delta(&rows);
    // ΔλD ≤ 0 up to solver noise of 1e-6 relative
    if !(delta <= 1e-4) {
        bad.push(format!("ΔλD = {delta:.3e}%"));
    }
    for b in &bad {
        println!("      {b}");
    }
    let small = max_delta(&sweep_rows("case10")?);
    outcome(
        bad.is_empty(),
        format!(
            "118-bus x0.5..x4: objective decreasing, max ΔλD(SW-AB vs SW-SB) = {delta:.2e}%; \
             for information case10 max ΔλD = {small:.2e}% (congested line 5-6)"
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Result<Outcome, String>); 13] = [
        (1, "Chebyshev factor", c1_chebyshev),
        (2, "policy equivalence (symmetric)", c2_policy_equivalence),
        (3, "price aggregation", c3_price_aggregation),
        (4, "β identity", c4_beta_identity),
        (5, "dual fidelity", c5_dual_fidelity),
        (6, "expected-cost oracle", c6_expected_cost),
        (7, "revenue adequacy", c7_revenue_adequacy),
        (8, "equilibrium", c8_equilibrium),
        (9, "cost equivalence", c9_cost_equivalence),
        (10, "McCormick sandwich and gap", c10_mccormick),
        (11, "chance-constraint conservatism", c11_violation_rates),
        (12, "SC-OPF structure", c12_scopf),
        (13, "qualitative payment and cost trends", c13_qualitative),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} {id:>2} {name}: {detail} [{:.1?}]", start.elapsed());
        if !pass {
            failed.push(id);
        }
    }
    let passed = 13 - failed.len();
    println!("acceptance: {passed}/13 pass, failing {failed:?}, expected failing {EXPECTED_FAILURES:?}");
    if failed != EXPECTED_FAILURES {
        std::process::exit(1);
    }
}
