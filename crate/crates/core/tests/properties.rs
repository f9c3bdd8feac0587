//! Randomized probes of the core invariants on small random lattices.

use bsdelab::config::{Coefficient, IntensitySpec, MarkConfig, ModelConfig, DEFAULT_NODE_BUDGET};
use bsdelab::indifference::{compare_routes, indifference_solve, supermartingale_check, Route};
use bsdelab::measure::martingale_check;
use bsdelab::oracles::brute_force_primal;
use bsdelab::utility::{duality_gap, solve_utility, UtilityOptions};
use bsdelab::validate::validate_model;
use bsdelab::{Claim, LatticeModel, SolveMode};
use proptest::prelude::*;

fn model(phi: f64, sigma: f64, steps: usize, weight: f64, zeta: f64) -> LatticeModel {
    let cfg = ModelConfig {
        horizon: 1.0,
        steps,
        s0: vec![1.0],
        phi: Coefficient::Constant(vec![phi]),
        sigma: Coefficient::Constant(vec![vec![sigma]]),
        marks: vec![MarkConfig {
            value: vec![1.0],
            weight,
            regime_shift: 1,
        }],
        intensity: Some(IntensitySpec::Constant(vec![zeta])),
        regimes: 1,
        initial_regime: 0,
        recombine: false,
        node_budget: DEFAULT_NODE_BUDGET,
    };
    LatticeModel::build(&cfg).unwrap()
}

fn claim(model: &LatticeModel, a: f64, k: f64, c: f64) -> Vec<f64> {
    let expr = format!("{a} * min(max(S - {k}, 0), 1) + {c} * N");
    let cl = Claim::parse(&expr).unwrap();
    cl.terminal_values(model).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dt_consistent_invariants(
        phi in -0.6f64..0.6,
        sigma in 0.1f64..0.5,
        steps in 1usize..=3,
        weight in 0.05f64..0.3,
        zeta in 0.5f64..2.0,
        alpha in 0.2f64..3.0,
        a in -1.0f64..1.0,
        k in 0.8f64..1.2,
        c in -0.3f64..0.3,
    ) {
        let m = model(phi, sigma, steps, weight, zeta);
        let v = validate_model(&m).unwrap();
        prop_assert!(v.max_prob_sum_residual <= 1e-15);
        let b = claim(&m, a, k, c);
        let opts = UtilityOptions::with_mode(SolveMode::DtConsistent);
        let r = solve_utility(&m, &b, alpha, 0.0, &opts).unwrap();
        let o = brute_force_primal(&m, &b, alpha, 0.0).unwrap();
        prop_assert!((r.y0() - o.y.at(0, 0)).abs() <= 1e-10);
        prop_assert!(duality_gap(&m, &r).abs() <= 1e-10);
        prop_assert!(martingale_check(&r.dual, &m).max_residual <= 1e-12);
        let cmp = compare_routes(&m, &b, alpha, &opts).unwrap();
        prop_assert!(cmp.pi_diff <= 1e-10 && cmp.psi_diff <= 1e-10, "{cmp:?}");
        let ind = indifference_solve(&m, &b, alpha, Route::Direct, &opts).unwrap();
        prop_assert!(supermartingale_check(&m, &ind).max_drift <= 1e-12);
    }

    #[test]
    fn euler_value_routes_agree(
        phi in -0.6f64..0.6,
        steps in 1usize..=3,
        alpha in 0.2f64..3.0,
        a in -1.0f64..1.0,
        c in -0.3f64..0.3,
    ) {
        let m = model(phi, 0.2, steps, 0.2, 1.0);
        let b = claim(&m, a, 1.0, c);
        let cmp = compare_routes(&m, &b, alpha, &UtilityOptions::with_mode(SolveMode::Euler)).unwrap();
        prop_assert!(cmp.pi_diff <= 1e-10, "{cmp:?}");
    }
}
