//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always show.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use bsdelab::bsde::SolverOptions;
use bsdelab::indifference::{
    asymptotics_sweep, compare_routes, entropic_problem_identity, hat_measure_martingale_check, indifference_solve,
    log_log_slope, scaling_identity, supermartingale_check, time_consistency_check, Route,
};
use bsdelab::measure::{compensator_defect, dual_objective, exponential_tilt_from_u, factorization_defect, jump_tilt_from_u, martingale_check, minimal_martingale_measure};
use bsdelab::oracles::{brute_force_dual, brute_force_primal, DualGrid};
use bsdelab::paths::StoppingRule;
use bsdelab::stability::perturbation_study;
use bsdelab::utility::{density_identity_defect, solve_utility, UtilityOptions};
use bsdelab::verify::{bound_excess, is_separable, Scenario};
use bsdelab::{GeneratorSpec, LatticeModel, Result, SolveMode};

const SCENARIOS: [&str; 4] = ["closed_form", "two_step_jump", "regime_switching", "insurance"];

fn scenario(name: &str) -> Scenario {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"));
    Scenario::load(&p).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn small() -> Vec<Scenario> {
    SCENARIOS[1..].iter().map(|n| scenario(n)).collect()
}

fn opts(mode: SolveMode) -> UtilityOptions {
    UtilityOptions::with_mode(mode)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn closed_form() -> Result<Outcome> {
    let mut worst_y = 0.0_f64;
    let mut worst_theta = 0.0_f64;
    let mut elapsed = 0.0;
    let mut build = 0.0;
    for n in [1, 4, 10] {
        let mut sc = scenario("closed_form");
        sc.document.model.steps = n;
        let sc = Scenario::from_document(sc.document)?;
        let t0 = Instant::now();
        let model = LatticeModel::build(&sc.document.model)?;
        let t1 = Instant::now();
        let r = solve_utility(&model, &sc.terminal, 2.0, 0.0, &opts(SolveMode::Euler))?;
        if n == 10 {
            build = (t1 - t0).as_secs_f64();
            elapsed = t1.elapsed().as_secs_f64();
        }
        worst_y = worst_y.max((r.y0() + 0.04).abs());
        let th = r.theta.theta().slices()[..n].iter().flatten();
        worst_theta = worst_theta.max(th.map(|t| (t - 0.2).abs()).fold(0.0, f64::max));
    }
    outcome(
        worst_y <= 1e-12 && worst_theta <= 1e-12 && elapsed < 1.0,
        format!("|Y0+0.04| {worst_y:.1e}, |theta-0.2| {worst_theta:.1e}, N=10 solve {elapsed:.3}s (lattice build {build:.3}s)"),
    )
}

fn boundedness() -> Result<Outcome> {
    let mut worst = f64::NEG_INFINITY;
    for name in SCENARIOS {
        let sc = scenario(name);
        let mut euler = opts(SolveMode::Euler);
        euler.truncated = true;
        for o in [euler, opts(SolveMode::DtConsistent)] {
            let r = solve_utility(&sc.model, &sc.terminal, sc.alpha(), 0.0, &o)?;
            let (ey, eu) = bound_excess(&sc.model, &r.y, &r.profile)?;
            worst = worst.max(ey).max(eu);
        }
    }
    outcome(worst <= 1e-10, format!("max excess over b(t) / 2b(t): {worst:.3e}"))
}

fn primal_oracle() -> Result<Outcome> {
    let sc = scenario("two_step_jump");
    let o = brute_force_primal(&sc.model, &sc.terminal, sc.alpha(), 0.0)?;
    let r = solve_utility(&sc.model, &sc.terminal, sc.alpha(), 0.0, &opts(SolveMode::DtConsistent))?;
    let dy = (r.y0() - o.y.at(0, 0)).abs();
    let dth = o.strategy.max_abs_diff_through(r.theta.theta(), sc.model.steps());
    let ns = [4usize, 8, 16, 32];
    let mut dts = Vec::new();
    let mut gaps = Vec::new();
    for &n in &ns {
        let mut doc = sc.document.clone();
        doc.model.steps = n;
        doc.model.recombine = true;
        let s = Scenario::from_document(doc)?;
        let o = brute_force_primal(&s.model, &s.terminal, s.alpha(), 0.0)?;
        let e = solve_utility(&s.model, &s.terminal, s.alpha(), 0.0, &opts(SolveMode::Euler))?;
        dts.push(s.model.dt());
        gaps.push((e.y0() - o.y.at(0, 0)).abs());
    }
    let slope = log_log_slope(&dts, &gaps).unwrap_or(f64::NAN);
    outcome(
        dy <= 1e-10 && dth <= 1e-10 && (0.8..=1.2).contains(&slope),
        format!("dt-consistent |dY0| {dy:.1e}, |dtheta| {dth:.1e}; Euler gap slope {slope:.3}"),
    )
}

fn dual_optimality() -> Result<Outcome> {
    let mut slack = f64::NEG_INFINITY;
    let mut mart = 0.0_f64;
    let mut comp = 0.0_f64;
    for name in ["two_step_jump", "regime_switching"] {
        let sc = scenario(name);
        for mode in [SolveMode::Euler, SolveMode::DtConsistent] {
            let r = solve_utility(&sc.model, &sc.terminal, sc.alpha(), 0.0, &opts(mode))?;
            mart = mart.max(martingale_check(&r.dual, &sc.model).max_residual);
            comp = comp.max(compensator_defect(&sc.model, &r.dual, &r.u, sc.alpha()));
            if mode == SolveMode::DtConsistent {
                let g = brute_force_dual(&sc.model, &sc.terminal, sc.alpha(), &DualGrid::default())?;
                slack = slack.max(g.objective - dual_objective(&r.dual, &sc.terminal, sc.alpha(), &sc.model));
            }
        }
    }
    outcome(
        slack <= 2e-2 && mart <= 1e-12 && comp <= 1e-14,
        format!("grid excess {slack:.3e}, martingale {mart:.1e}, compensator {comp:.1e}"),
    )
}

fn densities() -> Result<Outcome> {
    let mut dens = 0.0_f64;
    let mut fact = 0.0_f64;
    for sc in small() {
        let dt = solve_utility(&sc.model, &sc.terminal, sc.alpha(), 0.0, &opts(SolveMode::DtConsistent))?;
        dens = dens.max(density_identity_defect(&sc.model, &dt)?);
        let eu = solve_utility(&sc.model, &sc.terminal, sc.alpha(), 0.0, &opts(SolveMode::Euler))?;
        let ph = minimal_martingale_measure(&sc.model)?;
        let comb = exponential_tilt_from_u(&sc.model, &eu.u, sc.alpha())?;
        let jumps = jump_tilt_from_u(&sc.model, &eu.u, sc.alpha())?;
        fact = fact.max(factorization_defect(&sc.model, &comb, &ph, &jumps));
    }
    outcome(dens <= 1e-10 && fact <= 1e-13, format!("path density {dens:.1e}, factorization {fact:.1e}"))
}

fn routes() -> Result<Outcome> {
    let mut pi = 0.0_f64;
    let mut psi = 0.0_f64;
    let mut def = 0.0_f64;
    let mut excluded = 0;
    for name in SCENARIOS {
        let sc = scenario(name);
        for mode in [SolveMode::Euler, SolveMode::DtConsistent] {
            let c = compare_routes(&sc.model, &sc.terminal, sc.alpha(), &opts(mode))?;
            pi = pi.max(c.pi_diff);
            let r = indifference_solve(&sc.model, &sc.terminal, sc.alpha(), Route::TwoRun, &opts(mode))?;
            // Euler hedges only coincide when the claim increments separate
            if mode == SolveMode::DtConsistent || is_separable(&sc.model, &r.pi)? {
                psi = psi.max(c.psi_diff);
            } else {
                excluded += 1;
            }
        }
        if name != "closed_form" {
            let r = indifference_solve(&sc.model, &sc.terminal, sc.alpha(), Route::TwoRun, &opts(SolveMode::DtConsistent))?;
            let x = sc.wealth();
            let zero = vec![0.0; sc.terminal.len()];
            let v0 = brute_force_primal(&sc.model, &zero, sc.alpha(), x)?;
            let vb = brute_force_primal(&sc.model, &sc.terminal, sc.alpha(), x + r.pi0())?;
            def = def.max((v0.value - vb.value).abs());
        }
    }
    outcome(
        pi <= 1e-10 && psi <= 1e-10 && def <= 1e-10,
        format!("value {pi:.1e}, hedge {psi:.1e} ({excluded} non-separable Euler hedges excluded), definition {def:.1e}"),
    )
}

fn structure() -> Result<Outcome> {
    let o = opts(SolveMode::DtConsistent);
    let mut drift = f64::NEG_INFINITY;
    let mut tc = 0.0_f64;
    let mut hat = 0.0_f64;
    let mut ident = 0.0_f64;
    let mut skipped = Vec::new();
    for sc in small() {
        let (m, b, a) = (&sc.model, &sc.terminal, sc.alpha());
        let r = indifference_solve(m, b, a, Route::Direct, &o)?;
        drift = drift.max(supermartingale_check(m, &r).max_drift);
        for rule in [StoppingRule::Deterministic(m.steps() / 2), StoppingRule::FirstJump] {
            let t = time_consistency_check(m, b, a, &rule, &o)?;
            tc = tc.max(t.direct_diff).max(t.two_run_diff);
        }
        let (h, _) = hat_measure_martingale_check(m, b, a, &o)?;
        if is_separable(m, &r.pi)? {
            hat = hat.max(h.max_residual);
        } else {
            skipped.push(format!("{} {:.1e}", sc.name, h.max_residual));
        }
        let e = entropic_problem_identity(m, b, a, &o)?;
        ident = ident.max(e.value_diff).max(e.strategy_diff).max(e.utility_gap);
    }
    let note = if skipped.is_empty() { String::new() } else { format!(" (non-separable, not asserted: {})", skipped.join(", ")) };
    outcome(
        drift <= 1e-12 && tc <= 1e-10 && hat <= 1e-10 && ident <= 1e-10,
        format!("drift {drift:.1e}, time consistency {tc:.1e}, hat-measure residual {hat:.1e}{note}, identity {ident:.1e}"),
    )
}

fn asymptotics() -> Result<Outcome> {
    let sc = scenario("two_step_jump");
    let t0 = Instant::now();
    let r = asymptotics_sweep(&sc.model, &sc.terminal, &[0.5, 0.25, 0.125, 0.0625], &opts(sc.document.solver.mode))?;
    let secs = t0.elapsed().as_secs_f64();
    let slope = r.slopes[0].unwrap_or(f64::NAN);
    // a gap that vanishes on the whole grid is bounded by any multiple of alpha
    let vanishing = |g: usize| r.rows.iter().all(|row| [row.sup_gap, row.z_gap, row.u_gap][g] <= 1e-12);
    let var: Vec<f64> = (0..3).map(|g| r.ratio_variation[g].unwrap_or(if vanishing(g) { 0.0 } else { f64::NAN })).collect();
    outcome(
        slope >= 0.9 && var.iter().all(|v| *v <= 0.25) && secs < 30.0,
        format!("sup slope {slope:.3}, ratio variation {:.3}/{:.3}/{:.3}, sweep {secs:.3}s", var[0], var[1], var[2]),
    )
}

fn stability() -> Result<Outcome> {
    let mut spread = 0.0_f64;
    for sc in small() {
        let dir = sc.model.terminal_values(|l| 1.0 + l.jumps.iter().map(|&n| n as f64).sum::<f64>());
        let st = perturbation_study(
            &sc.model,
            &GeneratorSpec::Entropic { alpha: sc.alpha() },
            &sc.terminal,
            &dir,
            &[1e-2, 1e-3],
            &SolverOptions::default(),
        )?;
        spread = spread.max(st.max_relative_spread);
    }
    outcome(spread <= 0.2, format!("max relative ratio spread {spread:.3e}"))
}

fn scaling() -> Result<Outcome> {
    let mut worst = 0.0_f64;
    for sc in small() {
        for mode in [SolveMode::Euler, SolveMode::DtConsistent] {
            for a in [0.5, 2.0] {
                let d = scaling_identity(&sc.model, a, &opts(mode))?;
                worst = worst.max(d.iter().copied().fold(0.0, f64::max));
            }
        }
    }
    outcome(worst <= 1e-10, format!("max defect {worst:.1e}"))
}

fn main() -> ExitCode {
    // keep the libtest flag surface harmless
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("closed-form regression", closed_form),
        ("boundedness", boundedness),
        ("primal oracle equivalence", primal_oracle),
        ("dual optimality", dual_optimality),
        ("density identities", densities),
        ("indifference route equivalence", routes),
        ("structural properties", structure),
        ("small risk-aversion asymptotics", asymptotics),
        ("stability estimate", stability),
        ("scaling identity", scaling),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (tag, detail) = match f() {
            Ok(o) if o.pass => ("PASS", o.detail),
            Ok(o) => ("FAIL", o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {:>2} {tag}  {name}: {detail}", i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
