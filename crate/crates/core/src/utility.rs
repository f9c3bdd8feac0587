//! Exponential utility maximization with a bounded liability.
//!
//! The investor maximizes `E[-exp(-α(x + Σθ·ΔŴ - B))]`. The value factors
//! as `-e^{-αx} e^{αY}` where Y solves, in Euler mode, the BSDE with the
//! entropic driver under the minimal martingale measure, and in
//! dt-consistent mode the exact entropic recursion under P. The optimal
//! integrand is `θ = Z + φ/α` and the dual optimizer is the exponential tilt
//! of P by the jump component U.

use serde::Serialize;

use crate::bsde::{solve_bsde_under, SolverOptions, Stopped};
use crate::config::SolveMode;
use crate::error::{Error, NodeId, Result};
use crate::field::NodeField;
use crate::generator::GeneratorSpec;
use crate::lattice::{LatticeModel, StrategyField};
use crate::measure::{
    exponential_tilt_from_u, minimal_martingale_measure, relative_entropy, MeasureChange, MeasureLabel,
};
use crate::oracles::entropic_recursion;
use crate::truncation::TruncationProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilityOptions {
    pub mode: SolveMode,
    /// Euler mode only: run the truncated route and assert the bound.
    pub truncated: bool,
    pub solver: SolverOptions,
}

impl Default for UtilityOptions {
    fn default() -> Self {
        Self {
            mode: SolveMode::Euler,
            truncated: false,
            solver: SolverOptions::default(),
        }
    }
}

impl UtilityOptions {
    pub fn with_mode(mode: SolveMode) -> Self {
        Self {
            mode,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct UtilityResult {
    pub alpha: f64,
    pub wealth: f64,
    pub mode: SolveMode,
    pub y: NodeField,
    pub z: NodeField,
    pub u: NodeField,
    /// dt-consistent mode: jump-outcome tilts including no jump.
    pub u_all: Option<NodeField>,
    pub theta: StrategyField,
    /// Dual optimizer Q^{E,B}: the exponential tilt by U in Euler mode, the
    /// exact one-step optimal tilt in dt-consistent mode (the two coincide
    /// when the tilt factors into sign and jump parts).
    pub dual: MeasureChange,
    /// Bound profile documented for this mode.
    pub profile: TruncationProfile,
    pub terminal: Vec<f64>,
}

impl UtilityResult {
    pub fn y0(&self) -> f64 {
        self.y.at(0, 0)
    }

    pub fn value0(&self) -> f64 {
        value_function(self.wealth, self.y0(), self.alpha)
    }

    /// V_t(x) at every node.
    pub fn value_field(&self) -> NodeField {
        self.y.map(|y| value_function(self.wealth, y, self.alpha))
    }
}

/// V = -e^{-αx} e^{αY}.
pub fn value_function(x: f64, y: f64, alpha: f64) -> f64 {
    -(alpha * (y - x)).exp()
}

fn claim_sup(terminal: &[f64]) -> f64 {
    terminal.iter().fold(0.0_f64, |a, b| a.max(b.abs()))
}

/// Bound profile used by the dt-consistent recursion: K_1 is the largest
/// one-step entropy of the minimal martingale measure per unit time over α.
pub fn dt_consistent_profile(model: &LatticeModel, alpha: f64, claim_sup: f64) -> Result<TruncationProfile> {
    let ph = minimal_martingale_measure(model)?;
    let mut h = 0.0_f64;
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let s: f64 = ph
                .probs(k, i)
                .iter()
                .zip(model.probs(k, i))
                .map(|(q, p)| q * (q / p).ln())
                .sum();
            h = h.max(s);
        }
    }
    let k1 = h / (alpha * model.dt());
    TruncationProfile::new(k1, 0.0, claim_sup + model.grid().horizon() * k1, model.grid().horizon())
}

/// Documented bound profile for (mode, α, B).
pub fn utility_profile(model: &LatticeModel, alpha: f64, terminal: &[f64], mode: SolveMode) -> Result<TruncationProfile> {
    match mode {
        SolveMode::Euler => TruncationProfile::exponential_utility(
            model.phi_sq_bound(),
            alpha,
            claim_sup(terminal),
            model.grid().horizon(),
        ),
        SolveMode::DtConsistent => dt_consistent_profile(model, alpha, claim_sup(terminal)),
    }
}

pub fn solve_utility(
    model: &LatticeModel,
    terminal: &[f64],
    alpha: f64,
    wealth: f64,
    opts: &UtilityOptions,
) -> Result<UtilityResult> {
    solve_utility_stopped(model, terminal, alpha, wealth, None, opts)
}

pub(crate) fn solve_utility_stopped(
    model: &LatticeModel,
    terminal: &[f64],
    alpha: f64,
    wealth: f64,
    stopped: Option<&Stopped>,
    opts: &UtilityOptions,
) -> Result<UtilityResult> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let profile = utility_profile(model, alpha, terminal, opts.mode)?;
    let d = model.d();
    let (y, z, u, u_all, theta, dual) = match opts.mode {
        SolveMode::Euler => {
            let phat = minimal_martingale_measure(model)?;
            let mut sopts = opts.solver;
            if opts.truncated {
                sopts.truncation = Some(profile);
            }
            let sol = solve_bsde_under(model, Some(&phat), &GeneratorSpec::Entropic { alpha }, terminal, stopped, &sopts)?;
            let mut theta = sol.z.clone();
            for k in 0..model.steps() {
                for i in 0..model.slice_len(k) {
                    let phi = model.phi(k, i);
                    for (c, t) in theta.get_mut(k, i).iter_mut().enumerate() {
                        *t += phi[c] / alpha;
                    }
                }
            }
            let dual = exponential_tilt_from_u(model, &sol.u, alpha)?.relabel(MeasureLabel::QEB);
            (sol.y, sol.z, sol.u, None, theta, dual)
        }
        SolveMode::DtConsistent => {
            let rec = entropic_recursion(model, terminal, alpha, None, stopped)?;
            let mut z = rec.theta.clone();
            for k in 0..model.steps() {
                for i in 0..model.slice_len(k) {
                    let phi = model.phi(k, i);
                    for (c, t) in z.get_mut(k, i).iter_mut().enumerate() {
                        *t -= phi[c] / alpha;
                    }
                }
            }
            let dual = rec.tilt_measure(model, MeasureLabel::QEB)?;
            (rec.y, z, rec.u, Some(rec.u_all), rec.theta, dual)
        }
    };
    debug_assert_eq!(theta.dim(), d);
    Ok(UtilityResult {
        alpha,
        wealth,
        mode: opts.mode,
        y,
        z,
        u,
        u_all,
        theta: StrategyField::new(theta),
        dual,
        profile,
        terminal: terminal.to_vec(),
    })
}

/// Euler-mode BSDE written under P with the Z-linear driver term, for
/// cross-checking the minimal-martingale-measure form.
pub fn solve_utility_p_form(model: &LatticeModel, terminal: &[f64], alpha: f64, solver: &SolverOptions) -> Result<crate::bsde::BsdeSolution> {
    solve_bsde_under(model, None, &GeneratorSpec::EntropicP { alpha }, terminal, None, solver)
}

/// Utility problem on the lattice re-weighted by `measure`, with market
/// price of risk zero: Ŵ is a `measure`-martingale and the jump
/// compensator is the one of `measure`.
pub fn solve_utility_under(
    model: &LatticeModel,
    measure: &MeasureChange,
    terminal: &[f64],
    alpha: f64,
    stopped: Option<&Stopped>,
    opts: &UtilityOptions,
) -> Result<(NodeField, NodeField, NodeField, Option<NodeField>)> {
    match opts.mode {
        SolveMode::Euler => {
            // the entropic driver with φ = 0 reduces to Σ g(u) rate
            let sol = solve_bsde_under(
                model,
                Some(measure),
                &GeneratorSpec::Indifference { alpha },
                terminal,
                stopped,
                &opts.solver,
            )?;
            Ok((sol.y, sol.z, sol.u, None))
        }
        SolveMode::DtConsistent => {
            let rec = entropic_recursion(model, terminal, alpha, Some(measure), stopped)?;
            Ok((rec.y, rec.theta, rec.u, Some(rec.u_all)))
        }
    }
}

/// Cumulative gains Σ θ·ΔŴ at every node. Trees only.
pub fn wealth_process(model: &LatticeModel, theta: &StrategyField) -> Result<NodeField> {
    if !model.is_tree() {
        return Err(Error::NotATree);
    }
    let mut out = model.zeros(1);
    let mut x = vec![0.0; model.d()];
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let g = out.at(k, i);
            let th = theta.at(k, i);
            for b in 0..model.branching() {
                model.hat_increment(k, i, b, &mut x);
                let inc: f64 = th.iter().zip(&x).map(|(t, c)| t * c).sum();
                out.set(k + 1, model.child(k, i, b), g + inc);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimalityReport {
    /// max over nodes of |relative drift| of R^θ at θ = θ^B.
    pub optimal_max_abs_drift: f64,
    pub optimal_worst_node: Option<NodeId>,
    /// Per candidate: largest relative drift (must be <= tol).
    pub candidate_max_drift: Vec<f64>,
    /// Per candidate: most negative relative drift (strictness).
    pub candidate_min_drift: Vec<f64>,
}

/// Relative one-step drift of R^θ_t = -exp(-α(x + G_t - Y_t)) at (k, i):
/// (E_t[R_{t+1}] - R_t)/|R_t| = 1 - E[exp(α(Y' - θ·ΔŴ - Y))].
pub fn relative_drift(model: &LatticeModel, y: &NodeField, theta: &[f64], alpha: f64, k: usize, i: usize) -> f64 {
    let mut x = vec![0.0; model.d()];
    let yk = y.at(k, i);
    let e: f64 = model
        .probs(k, i)
        .iter()
        .enumerate()
        .map(|(b, &p)| {
            model.hat_increment(k, i, b, &mut x);
            let g: f64 = theta.iter().zip(&x).map(|(t, c)| t * c).sum();
            p * (alpha * (y.at(k + 1, model.child(k, i, b)) - g - yk)).exp()
        })
        .sum();
    1.0 - e
}

/// Supermartingale check of R^θ for candidates, martingale check at θ^B.
pub fn verify_martingale_optimality(model: &LatticeModel, result: &UtilityResult, candidates: &[StrategyField]) -> OptimalityReport {
    let mut rep = OptimalityReport {
        optimal_max_abs_drift: 0.0,
        optimal_worst_node: None,
        candidate_max_drift: vec![f64::NEG_INFINITY; candidates.len()],
        candidate_min_drift: vec![f64::INFINITY; candidates.len()],
    };
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let dr = relative_drift(model, &result.y, result.theta.at(k, i), result.alpha, k, i);
            if dr.abs() > rep.optimal_max_abs_drift {
                rep.optimal_max_abs_drift = dr.abs();
                rep.optimal_worst_node = Some(NodeId::new(k, i));
            }
            for (c, cand) in candidates.iter().enumerate() {
                let dr = relative_drift(model, &result.y, cand.at(k, i), result.alpha, k, i);
                rep.candidate_max_drift[c] = rep.candidate_max_drift[c].max(dr);
                rep.candidate_min_drift[c] = rep.candidate_min_drift[c].min(dr);
            }
        }
    }
    rep
}

/// Residual rate of the L = e^{αY} identity: max over nodes of
/// |E^{P̂}[L'] - L exp((|φ|² + α²|Z|²) dt / 2)| / (L dt).
pub fn l_process_identity(model: &LatticeModel, result: &UtilityResult) -> Result<f64> {
    let phat = minimal_martingale_measure(model)?;
    let alpha = result.alpha;
    let dt = model.dt();
    let mut worst = 0.0_f64;
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let l = (alpha * result.y.at(k, i)).exp();
            let next: f64 = phat
                .probs(k, i)
                .iter()
                .enumerate()
                .map(|(b, q)| q * (alpha * result.y.at(k + 1, model.child(k, i, b))).exp())
                .sum();
            let phi_sq: f64 = model.phi(k, i).iter().map(|p| p * p).sum();
            let z_sq: f64 = result.z.get(k, i).iter().map(|z| z * z).sum();
            let pred = l * (0.5 * (phi_sq + alpha * alpha * z_sq) * dt).exp();
            worst = worst.max((next - pred).abs() / (l * dt));
        }
    }
    Ok(worst)
}

/// Leaf-wise and node-wise gap between the dual density computed as the
/// product of branch factors and as exp(-α(Y_0 + Σθ·ΔŴ - Y_t)). Trees only.
pub fn density_identity_defect(model: &LatticeModel, result: &UtilityResult) -> Result<f64> {
    let path = result.dual.path_density(model)?;
    let gains = wealth_process(model, &result.theta)?;
    let y0 = result.y0();
    let mut worst = 0.0_f64;
    for k in 0..=model.steps() {
        for i in 0..model.slice_len(k) {
            let ordinary = (-result.alpha * (y0 + gains.at(k, i) - result.y.at(k, i))).exp();
            worst = worst.max((ordinary - path.at(k, i)).abs());
        }
    }
    Ok(worst)
}

/// α Y_0 - (α E^{Q^{E,B}}[B] - H(Q^{E,B}|P)).
pub fn duality_gap(model: &LatticeModel, result: &UtilityResult) -> f64 {
    let obj = result.alpha * result.dual.expect_terminal(model, &result.terminal) - relative_entropy(&result.dual, model);
    result.alpha * result.y0() - obj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::tests::config;
    use crate::oracles::brute_force_primal;

    #[test]
    fn value_function_examples() {
        assert_eq!(value_function(0.0, 0.0, 1.0), -1.0);
        assert!((value_function(1.0, 0.5, 2.0) + (-1.0f64).exp()).abs() < 1e-16);
        assert!((value_function(0.3, 0.1, 2.0) - value_function(0.8, 0.6, 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_claim_zero_phi() {
        let model = LatticeModel::build(&config(0.0, 0.2, 2, &[(1.0, 0.2)])).unwrap();
        let b = vec![0.0; model.slice_len(2)];
        let r = solve_utility(&model, &b, 1.0, 0.5, &UtilityOptions::default()).unwrap();
        assert_eq!(r.y.max_abs(), 0.0);
        assert_eq!(r.theta.theta().max_abs(), 0.0);
        assert!((r.value0() + (-0.5f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn closed_form_value_and_strategy() {
        let model = LatticeModel::build(&config(0.4, 0.2, 4, &[(1.0, 0.2)])).unwrap();
        let b = vec![0.0; model.slice_len(4)];
        let r = solve_utility(&model, &b, 2.0, 0.0, &UtilityOptions::default()).unwrap();
        assert!((r.y0() + 0.04).abs() < 1e-12);
        assert!(r.theta.theta().map(|t| t - 0.2).max_abs_through(4) < 1e-12);
        assert!((r.value0() + (-0.08f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn wealth_process_constant_strategy() {
        let model = LatticeModel::build(&config(0.4, 0.2, 1, &[])).unwrap();
        let th = StrategyField::constant(&model, &[1.0]);
        let w = wealth_process(&model, &th).unwrap();
        let dt: f64 = 1.0;
        let mut v = vec![w.at(1, 0), w.at(1, 1)];
        v.sort_by(f64::total_cmp);
        assert!((v[0] - (-dt.sqrt() + 0.4 * dt)).abs() < 1e-15);
        assert!((v[1] - (dt.sqrt() + 0.4 * dt)).abs() < 1e-15);
    }

    #[test]
    fn dt_consistent_matches_primal_oracle_and_is_martingale_optimal() {
        let model = LatticeModel::build(&config(0.4, 0.2, 2, &[(1.0, 0.2)])).unwrap();
        let b = model.terminal_values(|l| 0.5 * (l.jumps[0] >= 1) as u8 as f64);
        let r = solve_utility(&model, &b, 1.0, 0.0, &UtilityOptions::with_mode(SolveMode::DtConsistent)).unwrap();
        let o = brute_force_primal(&model, &b, 1.0, 0.0).unwrap();
        assert!((r.y0() - o.y.at(0, 0)).abs() < 1e-10);
        assert!(r.theta.theta().max_abs_diff_through(&o.strategy, 2) < 1e-10);
        let bumped = StrategyField::new(r.theta.theta().map(|t| t + 0.5));
        let rep = verify_martingale_optimality(&model, &r, &[bumped]);
        assert!(rep.optimal_max_abs_drift < 1e-10);
        assert!(rep.candidate_max_drift[0] <= 1e-12);
        assert!(rep.candidate_min_drift[0] < -1e-6);
        assert!(density_identity_defect(&model, &r).unwrap() < 1e-10);
        assert!(duality_gap(&model, &r).abs() < 1e-10);
    }

    #[test]
    fn p_form_matches_minimal_measure_form_on_separable_claims() {
        let model = LatticeModel::build(&config(0.4, 0.2, 3, &[(1.0, 0.2)])).unwrap();
        let b = model.terminal_values(|l| 0.5 * (l.jumps[0] >= 1) as u8 as f64);
        let r = solve_utility(&model, &b, 1.0, 0.0, &UtilityOptions::default()).unwrap();
        let p = solve_utility_p_form(&model, &b, 1.0, &SolverOptions::default()).unwrap();
        assert!(r.y.max_abs_diff(&p.y) < 1e-10);
    }

    #[test]
    fn l_process_closed_form_is_exact() {
        let model = LatticeModel::build(&config(0.4, 0.2, 4, &[(1.0, 0.2)])).unwrap();
        let b = vec![0.0; model.slice_len(4)];
        let r = solve_utility(&model, &b, 2.0, 0.0, &UtilityOptions::default()).unwrap();
        assert!(l_process_identity(&model, &r).unwrap() < 1e-12);
    }
}
