use std::sync::OnceLock;

use nalgebra::DMatrix;
use proptest::prelude::*;

use ccmarket::conic::{self, ConicProgram};
use ccmarket::grid::{load_case, scale_res, GridCase};
use ccmarket::market::{clear, expected_cost, DispatchResult};
use ccmarket::mccormick::{envelope, gap_percent, McCormickBounds, Product};
use ccmarket::output::round_sig;
use ccmarket::pricing::{beta, price_clearing};
use ccmarket::uncertainty::{assemble_for_case, chebyshev_z, sample_errors, split_truncated, UncertaintyModel};
use ccmarket::{BalancingPolicy, SolveOptions};

fn data(name: &str) -> GridCase {
    load_case(format!("{}/data/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn sw_ab() -> &'static (GridCase, UncertaintyModel, DispatchResult) {
    static CELL: OnceLock<(GridCase, UncertaintyModel, DispatchResult)> = OnceLock::new();
    CELL.get_or_init(|| {
        let case = data("case10");
        let unc = assemble_for_case(BalancingPolicy::SwAb, &case, None).unwrap();
        let c = clear(BalancingPolicy::SwAb, &case, &unc, &SolveOptions::default()).unwrap();
        (case, unc, c.dispatch)
    })
}

fn n2n_sb() -> &'static (GridCase, UncertaintyModel) {
    static CELL: OnceLock<(GridCase, UncertaintyModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let case = data("case10");
        let unc = assemble_for_case(BalancingPolicy::N2nSb, &case, None).unwrap();
        (case, unc)
    })
}

fn psd(entries: &[f64], n: usize) -> DMatrix<f64> {
    let b = DMatrix::from_row_slice(n, n, &entries[..n * n]);
    &b * b.transpose() + DMatrix::identity(n, n) * 0.01
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_sums_to_one(n in 1usize..6, entries in prop::collection::vec(0.0f64..2.0, 36)) {
        let sigma = psd(&entries, n);
        let b = beta(&sigma).unwrap();
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let total = sigma.sum();
        for (u, bu) in b.iter().enumerate() {
            let row: f64 = sigma.row(u).iter().sum();
            prop_assert!((bu * total - row).abs() <= 1e-12 * total.abs());
        }
    }

    #[test]
    fn chebyshev_factor(e1 in 1e-4f64..0.5, e2 in 1e-4f64..0.5) {
        let z1 = chebyshev_z(e1).unwrap();
        prop_assert!((z1 * z1 * e1 - (1.0 - e1)).abs() < 1e-9);
        let z2 = chebyshev_z(e2).unwrap();
        if e1 < e2 {
            prop_assert!(z1 > z2);
        }
    }

    #[test]
    fn truncated_split_keeps_variance(sigma in 0.0f64..1e3) {
        let (mu, spm) = split_truncated(sigma).unwrap();
        prop_assert!(mu >= 0.0 && spm >= 0.0);
        prop_assert!((mu * mu + spm * spm - sigma * sigma).abs() <= 1e-12 * sigma * sigma + 1e-300);
    }

    #[test]
    fn round_sig_idempotent(m in -1.0f64..1.0, e in -30i32..30) {
        let x = m * 10f64.powi(e);
        let r = round_sig(x);
        prop_assert_eq!(round_sig(r), r);
        prop_assert!((r - x).abs() <= 5e-12 * x.abs());
    }

    #[test]
    fn gap_nonnegative_when_sandwiched(lower in -1e4f64..1e4, d in 0.0f64..1e3) {
        prop_assume!(lower != 0.0);
        prop_assert!(gap_percent(lower, lower + d) >= 0.0);
    }

    // A single bilinear term over a box: the envelope is exact at the corners,
    // so the relaxed minimum equals the smallest corner product.
    #[test]
    fn envelope_exact_for_one_product(
        coef in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0],
        xl in -5.0f64..5.0, xw in 0.1f64..5.0,
        yl in -5.0f64..5.0, yw in 0.1f64..5.0,
    ) {
        let (xu, yu) = (xl + xw, yl + yw);
        let mut p = ConicProgram::new();
        let x = p.add_var("x", xl, xu).unwrap();
        let y = p.add_var("y", yl, yu).unwrap();
        p.add_quad(x, y, coef);
        let env = envelope(&p, &[Product { x, y, coef, x_lb: xl, x_ub: xu, y_lb: yl, y_ub: yu }]).unwrap();
        let sol = conic::solve(&env, &SolveOptions::default()).unwrap();
        prop_assert!(sol.is_optimal());
        let corner = [(xl, yl), (xl, yu), (xu, yl), (xu, yu)]
            .iter()
            .map(|(a, b)| coef * a * b)
            .fold(f64::INFINITY, f64::min);
        prop_assert!((sol.objective - corner).abs() <= 1e-6 * (1.0 + corner.abs()), "{} vs {}", sol.objective, corner);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tightened_boxes_nest_and_contain(shrink in 0.05f64..0.95, rounds in 1usize..8) {
        let (case, unc, d) = sw_ab();
        let mut b = McCormickBounds::initial(case, unc, shrink);
        prop_assert!(b.contains(d, 1e-7));
        for _ in 0..rounds {
            let next = b.tighten(d);
            prop_assert!(next.is_nested_in(&b));
            prop_assert!(next.contains(d, 1e-7));
            b = next;
        }
    }

    #[test]
    fn expected_cost_matches_sampling(
        p in 20.0f64..150.0,
        raw in prop::collection::vec(0.0f64..1.0, 12),
    ) {
        // sign parts of a Gaussian draw do not follow the truncated split,
        // so sampling only checks the symmetric policies
        let (case, unc) = n2n_sb();
        let k = unc.num_columns();
        let total: f64 = raw[..k].iter().sum::<f64>() + 1e-9;
        let a: Vec<f64> = raw[..k].iter().map(|v| v / total).collect();
        let g = &case.generators[0];
        let mean: Vec<f64> = unc.mean_vector.iter().copied().collect();
        let exact = expected_cost(g, p, &a, &mean, &unc.covariance).unwrap();
        let draws = sample_errors(unc, 100_000, 11);
        let mut acc = 0.0;
        for r in 0..draws.nrows() {
            let shift: f64 = (0..k).map(|c| draws[(r, c)] * a[c]).sum();
            let out = p - shift;
            acc += g.c2 * out * out + g.c1 * out + g.c0;
        }
        let mc = acc / draws.nrows() as f64;
        prop_assert!((mc - exact).abs() <= 5e-3 * exact.abs(), "{mc} vs {exact}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn adequacy_gap_is_congestion_rent(
        scale in 0.5f64..4.0,
        policy in prop_oneof![
            Just(BalancingPolicy::SwSb),
            Just(BalancingPolicy::N2nSb),
            Just(BalancingPolicy::SwAb),
            Just(BalancingPolicy::N2nAb),
        ],
    ) {
        let case = scale_res(&data("case10"), scale).unwrap();
        let unc = assemble_for_case(policy, &case, None).unwrap();
        let c = clear(policy, &case, &unc, &SolveOptions::default()).unwrap();
        let st = price_clearing(&case, &unc, c).unwrap().settlement;
        prop_assert!((st.adequacy_gap - st.congestion_rent).abs() <= 1e-5 * st.consumer_payment);
    }

    #[test]
    fn case_json_round_trip(scale in 0.1f64..5.0) {
        let case = scale_res(&data("case10"), scale).unwrap();
        let text = case.to_json_string();
        let back = GridCase::from_json_str(&text).unwrap();
        prop_assert_eq!(back.res_scale, 1.0);
        prop_assert_eq!(&back.buses, &case.buses);
        prop_assert_eq!(&back.generators, &case.generators);
        for (b, u) in back.res_units.iter().zip(&case.res_units) {
            prop_assert!((b.forecast - u.forecast * scale).abs() <= 1e-12 * b.forecast.abs());
            prop_assert!((b.sigma - u.sigma * scale).abs() <= 1e-12 * b.sigma.abs());
        }
        prop_assert_eq!(back.to_json_string(), text);
    }
}
