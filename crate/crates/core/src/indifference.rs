//! Indifference value and hedge, the small risk-aversion limit, and the
//! structural properties of the indifference value process.
//!
//! Two routes compute π and ψ:
//!
//! * two-run: π = Y^B - Y^0 and ψ = Z^B - Z^0 from two utility solves;
//! * direct: one solve under the minimal entropy measure Q^E with the
//!   driver Σ_j g_α(U_j) ζ^E_j λ_j (Euler) or the entropic recursion under
//!   Q^E (dt-consistent).
//!
//! Q^E is built from the no-claim solution at the α of the run: the
//! exponential tilt by U^0 in Euler mode, the exact one-step optimal tilt
//! in dt-consistent mode.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_bsde_under, BsdeSolution, Stopped};
use crate::config::SolveMode;
use crate::error::{Error, NodeId, Result};
use crate::field::NodeField;
use crate::generator::{hat_tilt, GeneratorSpec};
use crate::lattice::LatticeModel;
use crate::measure::{exponential_tilt_from_u, hat_tilt_measure, hat_tilt_measure_all, MeasureChange, MeasureLabel};
use crate::paths::{conditional_running_sum, StoppingRule};
use crate::utility::{solve_utility_stopped, solve_utility_under, UtilityOptions, UtilityResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Route {
    TwoRun,
    Direct,
}

#[derive(Debug, Clone, Serialize)]
pub struct IndifferenceResult {
    pub alpha: f64,
    pub mode: SolveMode,
    pub route: Route,
    /// Indifference value process π.
    pub pi: NodeField,
    /// Indifference hedge ψ.
    pub psi: NodeField,
    /// Jump integrand of π relative to the no-jump outcome.
    pub u: NodeField,
    /// dt-consistent direct route: per-outcome tilts, no jump first.
    pub u_all: Option<NodeField>,
    #[serde(skip)]
    pub q_e: MeasureChange,
    /// No-claim certainty equivalent Y^{0,α}.
    pub y_zero: NodeField,
    /// U^{0,α}.
    pub u_zero: NodeField,
}

impl IndifferenceResult {
    pub fn pi0(&self) -> f64 {
        self.pi.at(0, 0)
    }
}

/// Q^E together with the no-claim utility solution it was built from.
pub fn minimal_entropy_measure(model: &LatticeModel, alpha: f64, opts: &UtilityOptions) -> Result<(MeasureChange, UtilityResult)> {
    let zero = vec![0.0; model.slice_len(model.steps())];
    let y0 = solve_utility_stopped(model, &zero, alpha, 0.0, None, &plain(opts))?;
    let q_e = match opts.mode {
        SolveMode::Euler => exponential_tilt_from_u(model, &y0.u, alpha)?,
        SolveMode::DtConsistent => y0.dual.clone(),
    }
    .relabel(MeasureLabel::QE);
    Ok((q_e, y0))
}

// Indifference runs never use the truncated utility route.
fn plain(opts: &UtilityOptions) -> UtilityOptions {
    UtilityOptions {
        truncated: false,
        ..*opts
    }
}

fn relative_u(u_all: &NodeField) -> NodeField {
    let m = u_all.dim() - 1;
    let sizes: Vec<usize> = (0..u_all.slice_count()).map(|k| u_all.slice_len(k)).collect();
    let mut out = NodeField::zeros(m, &sizes);
    for (k, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let a = u_all.get(k, i);
            for j in 0..m {
                out.get_mut(k, i)[j] = a[j + 1] - a[0];
            }
        }
    }
    out
}

pub fn indifference_solve(
    model: &LatticeModel,
    terminal: &[f64],
    alpha: f64,
    route: Route,
    opts: &UtilityOptions,
) -> Result<IndifferenceResult> {
    let (q_e, y0) = minimal_entropy_measure(model, alpha, opts)?;
    indifference_with(model, terminal, alpha, route, opts, q_e, &y0, None)
}

#[allow(clippy::too_many_arguments)]
fn indifference_with(
    model: &LatticeModel,
    terminal: &[f64],
    alpha: f64,
    route: Route,
    opts: &UtilityOptions,
    q_e: MeasureChange,
    y0: &UtilityResult,
    stopped: Option<(&Stopped, &Stopped, &Stopped)>,
) -> Result<IndifferenceResult> {
    let opts = plain(opts);
    let (pi, psi, u, u_all) = match route {
        Route::TwoRun => {
            let (yb, y0s) = match stopped {
                Some((sb, s0, _)) => (
                    solve_utility_stopped(model, terminal, alpha, 0.0, Some(sb), &opts)?,
                    solve_utility_stopped(model, &y0.terminal, alpha, 0.0, Some(s0), &opts)?,
                ),
                None => (solve_utility_stopped(model, terminal, alpha, 0.0, None, &opts)?, y0.clone()),
            };
            let pi = yb.y.zip_with(&y0s.y, |a, b| a - b);
            let psi = yb.z.zip_with(&y0s.z, |a, b| a - b);
            let u = match opts.mode {
                SolveMode::Euler => yb.u.zip_with(&y0s.u, |a, b| a - b),
                SolveMode::DtConsistent => {
                    let ua = yb.u_all.as_ref().expect("dt mode stores u_all");
                    let u0 = y0s.u_all.as_ref().expect("dt mode stores u_all");
                    relative_u(&ua.zip_with(u0, |a, b| a - b))
                }
            };
            (pi, psi, u, None)
        }
        Route::Direct => {
            let st = stopped.map(|(_, _, sp)| sp);
            let (y, z, u, u_all) = solve_utility_under(model, &q_e, terminal, alpha, st, &opts)?;
            let u = match &u_all {
                Some(a) => relative_u(a),
                None => u,
            };
            (y, z, u, u_all)
        }
    };
    Ok(IndifferenceResult {
        alpha,
        mode: opts.mode,
        route,
        pi,
        psi,
        u,
        u_all,
        q_e,
        y_zero: y0.y.clone(),
        u_zero: y0.u.clone(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RouteComparison {
    pub pi_diff: f64,
    pub psi_diff: f64,
    pub pi0: f64,
}

/// Node-wise comparison of the two routes.
pub fn compare_routes(model: &LatticeModel, terminal: &[f64], alpha: f64, opts: &UtilityOptions) -> Result<RouteComparison> {
    let (q_e, y0) = minimal_entropy_measure(model, alpha, opts)?;
    let a = indifference_with(model, terminal, alpha, Route::TwoRun, opts, q_e.clone(), &y0, None)?;
    let b = indifference_with(model, terminal, alpha, Route::Direct, opts, q_e, &y0, None)?;
    let n = model.steps();
    Ok(RouteComparison {
        pi_diff: a.pi.max_abs_diff(&b.pi),
        psi_diff: a.psi.max_abs_diff_through(&b.psi, n),
        pi0: a.pi0(),
    })
}

/// Zero-driver solution under Q^E: (Y^{E,0}, Z^{E,0}, U^{E,0}).
pub fn risk_min_solve(model: &LatticeModel, q_e: &MeasureChange, terminal: &[f64]) -> Result<BsdeSolution> {
    solve_bsde_under(model, Some(q_e), &GeneratorSpec::Zero, terminal, None, &Default::default())
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    /// max over nodes of E^Q[π' | node] - π.
    pub max_drift: f64,
    pub min_drift: f64,
    pub worst_node: Option<NodeId>,
}

fn drift_scan(model: &LatticeModel, q: &MeasureChange, pi: &NodeField) -> DriftReport {
    let mut rep = DriftReport {
        max_drift: f64::NEG_INFINITY,
        min_drift: f64::INFINITY,
        worst_node: None,
    };
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let e: f64 = q
                .probs(k, i)
                .iter()
                .enumerate()
                .map(|(b, p)| p * pi.at(k + 1, model.child(k, i, b)))
                .sum();
            let d = e - pi.at(k, i);
            if d > rep.max_drift {
                rep.max_drift = d;
                rep.worst_node = Some(NodeId::new(k, i));
            }
            rep.min_drift = rep.min_drift.min(d);
        }
    }
    rep
}

/// Q^E drift of π (nonpositive for a supermartingale).
pub fn supermartingale_check(model: &LatticeModel, result: &IndifferenceResult) -> DriftReport {
    drift_scan(model, &result.q_e, &result.pi)
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeConsistencyReport {
    /// Direct route re-solved with claim π_τ at τ.
    pub direct_diff: f64,
    /// Two-run route re-solved with the value processes stopped at τ.
    pub two_run_diff: f64,
    pub alive_nodes: usize,
}

/// Re-solves on [0, τ] with terminal data at τ and compares with π on the
/// nodes reached before τ.
pub fn time_consistency_check(
    model: &LatticeModel,
    terminal: &[f64],
    alpha: f64,
    rule: &StoppingRule,
    opts: &UtilityOptions,
) -> Result<TimeConsistencyReport> {
    let (q_e, y0) = minimal_entropy_measure(model, alpha, opts)?;
    let full = indifference_with(model, terminal, alpha, Route::Direct, opts, q_e.clone(), &y0, None)?;
    let yb = solve_utility_stopped(model, terminal, alpha, 0.0, None, &plain(opts))?;
    let alive = rule.alive(model)?;
    let sp = rule.stopped_values(model, &full.pi)?;
    let sb = rule.stopped_values(model, &yb.y)?;
    let s0 = rule.stopped_values(model, &y0.y)?;
    let direct = indifference_with(model, terminal, alpha, Route::Direct, opts, q_e.clone(), &y0, Some((&sb, &s0, &sp)))?;
    let two = indifference_with(model, terminal, alpha, Route::TwoRun, opts, q_e, &y0, Some((&sb, &s0, &sp)))?;
    let mut rep = TimeConsistencyReport {
        direct_diff: 0.0,
        two_run_diff: 0.0,
        alive_nodes: 0,
    };
    for (k, ak) in alive.iter().enumerate() {
        for (i, &a) in ak.iter().enumerate() {
            if !a {
                continue;
            }
            rep.alive_nodes += 1;
            rep.direct_diff = rep.direct_diff.max((direct.pi.at(k, i) - full.pi.at(k, i)).abs());
            rep.two_run_diff = rep.two_run_diff.max((two.pi.at(k, i) - full.pi.at(k, i)).abs());
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct HatMeasureReport {
    /// max over nodes of |E^{Q̂}[π' | node] - π|.
    pub max_residual: f64,
    pub worst_node: Option<NodeId>,
    /// max over (node, mark) of |Q̂(jump e_j) - c (h(U_j) + 1) Q^E(jump e_j)|,
    /// c the per-node normalizer (1 in Euler mode).
    pub compensator_defect: f64,
}

/// Builds Q̂^B from the direct-route solution and checks that π is a
/// Q̂^B-martingale. In dt-consistent mode every jump outcome (no jump
/// included) is tilted and the result normalized.
pub fn hat_measure_martingale_check(
    model: &LatticeModel,
    terminal: &[f64],
    alpha: f64,
    opts: &UtilityOptions,
) -> Result<(HatMeasureReport, MeasureChange)> {
    let res = indifference_solve(model, terminal, alpha, Route::Direct, opts)?;
    let q_hat = match (&res.u_all, opts.mode) {
        (Some(u_all), SolveMode::DtConsistent) => hat_tilt_measure_all(model, &res.q_e, u_all, alpha)?,
        _ => hat_tilt_measure(model, &res.q_e, &res.u, alpha)?,
    };
    let mut rep = HatMeasureReport {
        max_residual: 0.0,
        worst_node: None,
        compensator_defect: 0.0,
    };
    let d = drift_scan(model, &q_hat, &res.pi);
    rep.max_residual = d.max_drift.abs().max(d.min_drift.abs());
    rep.worst_node = d.worst_node;
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let node = NodeId::new(k, i);
            let qe = res.q_e.jump_dist(model, k, i);
            let qh = q_hat.jump_dist(model, k, i);
            let (uj, norm): (Vec<f64>, f64) = match &res.u_all {
                Some(u_all) if opts.mode == SolveMode::DtConsistent => {
                    let a = u_all.get(k, i);
                    let mut norm = 0.0;
                    for (j, &q) in qe.iter().enumerate() {
                        norm += q * (1.0 + hat_tilt(alpha, a[j]).map_err(|value| Error::Overflow { node, value })?);
                    }
                    (a[1..].to_vec(), norm)
                }
                _ => (res.u.get(k, i).to_vec(), 1.0),
            };
            for j in 0..model.m() {
                let h = hat_tilt(alpha, uj[j]).map_err(|value| Error::Overflow { node, value })?;
                let expect = (h + 1.0) * qe[j + 1] / norm;
                rep.compensator_defect = rep.compensator_defect.max((qh[j + 1] - expect).abs());
            }
        }
    }
    Ok((rep, q_hat))
}

#[derive(Debug, Clone, Serialize)]
pub struct EntropicIdentityReport {
    /// max over nodes of |Y^{Q^E} - π| with π from the two-run route.
    pub value_diff: f64,
    /// max over non-terminal nodes of |θ^{Q^E} - ψ|.
    pub strategy_diff: f64,
    /// |E^{Q^E}[-exp(-α(Σψ·ΔŴ - B))] + exp(απ_0)|.
    pub utility_gap: f64,
}

/// Solves the exponential problem on the Q^E lattice with zero market price
/// of risk and compares it with the two-run indifference value and hedge.
pub fn entropic_problem_identity(
    model: &LatticeModel,
    terminal: &[f64],
    alpha: f64,
    opts: &UtilityOptions,
) -> Result<EntropicIdentityReport> {
    let (q_e, y0) = minimal_entropy_measure(model, alpha, opts)?;
    let two = indifference_with(model, terminal, alpha, Route::TwoRun, opts, q_e.clone(), &y0, None)?;
    let (y, theta, _, _) = solve_utility_under(model, &q_e, terminal, alpha, None, &plain(opts))?;
    let n = model.steps();
    let k0 = exponential_utility_under(model, &q_e, &two.psi, terminal, alpha);
    Ok(EntropicIdentityReport {
        value_diff: y.max_abs_diff(&two.pi),
        strategy_diff: theta.max_abs_diff_through(&two.psi, n),
        utility_gap: (k0 - (alpha * two.pi0()).exp()).abs(),
    })
}

/// E^Q[exp(α(B - Σθ·ΔŴ))] from the root; the expected utility at zero
/// wealth is its negative.
pub fn exponential_utility_under(model: &LatticeModel, q: &MeasureChange, theta: &NodeField, terminal: &[f64], alpha: f64) -> f64 {
    let n = model.steps();
    let mut next: Vec<f64> = terminal.iter().map(|b| (alpha * b).exp()).collect();
    let mut x = vec![0.0; model.d()];
    for k in (0..n).rev() {
        let cur: Vec<f64> = (0..model.slice_len(k))
            .map(|i| {
                let th = theta.get(k, i);
                q.probs(k, i)
                    .iter()
                    .enumerate()
                    .map(|(b, p)| {
                        model.hat_increment(k, i, b, &mut x);
                        let g: f64 = th.iter().zip(&x).map(|(t, c)| t * c).sum();
                        p * (-alpha * g).exp() * next[model.child(k, i, b)]
                    })
                    .sum()
            })
            .collect();
        next = cur;
    }
    next[0]
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticsRow {
    pub alpha: f64,
    /// max over nodes of |π^α - Y^{E,0}|.
    pub sup_gap: f64,
    /// sqrt of max over nodes of E^{Q^E}[Σ |ψ^α - Z^{E,0}|² dt | node].
    pub z_gap: f64,
    /// sqrt of max over nodes of E^{Q^E}[Σ_s Σ_j |U^α_j - U^{E,0}_j|² Q^E(jump e_j) | node].
    pub u_gap: f64,
    pub pi0: f64,
    pub risk_min0: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticsReport {
    pub rows: Vec<AsymptoticsRow>,
    /// Log-log least-squares slopes of (sup, Z, U) gaps against α; `None`
    /// when a gap vanishes somewhere on the grid.
    pub slopes: [Option<f64>; 3],
    /// For each gap: max/min of gap(α)/α over the grid, minus 1.
    pub ratio_variation: [Option<f64>; 3],
    /// max over the grid of gap(α)/α, per gap.
    pub ratio_max: [f64; 3],
}

/// Gaps below this multiple of max(1, sup|B|) are treated as zero.
pub const GAP_NOISE: f64 = 1e-12;

pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || y.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn asymptotics_row(model: &LatticeModel, terminal: &[f64], alpha: f64, opts: &UtilityOptions) -> Result<AsymptoticsRow> {
    let res = indifference_solve(model, terminal, alpha, Route::Direct, opts)?;
    let rm = risk_min_solve(model, &res.q_e, terminal)?;
    let dt = model.dt();
    let mut z_run = model.zeros(1);
    let mut u_run = model.zeros(1);
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let dz: f64 = res.psi.get(k, i).iter().zip(rm.z.get(k, i)).map(|(a, b)| (a - b).powi(2)).sum();
            z_run.set(k, i, dz * dt);
            let jd = res.q_e.jump_dist(model, k, i);
            let du: f64 = res
                .u
                .get(k, i)
                .iter()
                .zip(rm.u.get(k, i))
                .enumerate()
                .map(|(j, (a, b))| (a - b).powi(2) * jd[j + 1])
                .sum();
            u_run.set(k, i, du);
        }
    }
    let zq = conditional_running_sum(model, Some(&res.q_e), &z_run);
    let uq = conditional_running_sum(model, Some(&res.q_e), &u_run);
    Ok(AsymptoticsRow {
        alpha,
        sup_gap: res.pi.max_abs_diff(&rm.y),
        z_gap: zq.max_abs().sqrt(),
        u_gap: uq.max_abs().sqrt(),
        pi0: res.pi0(),
        risk_min0: rm.y0(),
    })
}

/// Gap norms between π^α and the zero-driver solution under Q^E across a
/// decreasing α grid in (0, 1].
pub fn asymptotics_sweep(model: &LatticeModel, terminal: &[f64], alphas: &[f64], opts: &UtilityOptions) -> Result<AsymptoticsReport> {
    if alphas.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(Error::InvalidArgument("risk-aversion grid must lie in (0, 1]".into()));
    }
    if alphas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("risk-aversion grid must be strictly decreasing".into()));
    }
    let rows: Vec<AsymptoticsRow> = alphas
        .par_iter()
        .map(|&a| asymptotics_row(model, terminal, a, opts))
        .collect::<Result<_>>()?;
    let gaps = |r: &AsymptoticsRow| [r.sup_gap, r.z_gap, r.u_gap];
    let mut slopes = [None; 3];
    let mut variation = [None; 3];
    let mut ratio_max = [0.0; 3];
    // gaps at round-off level count as vanishing
    let floor = GAP_NOISE * terminal.iter().fold(1.0_f64, |a, b| a.max(b.abs()));
    for g in 0..3 {
        let y: Vec<f64> = rows.iter().map(|r| gaps(r)[g]).map(|v| if v <= floor { 0.0 } else { v }).collect();
        slopes[g] = log_log_slope(alphas, &y);
        let ratios: Vec<f64> = y.iter().zip(&rows).map(|(v, r)| v / r.alpha).collect();
        let hi = ratios.iter().copied().fold(0.0, f64::max);
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        ratio_max[g] = hi;
        variation[g] = (lo > 0.0).then(|| hi / lo - 1.0);
    }
    Ok(AsymptoticsReport {
        rows,
        slopes,
        ratio_variation: variation,
        ratio_max,
    })
}

/// α Y^{0,α} compared node-wise with Y^{0,1}, plus the α-invariance of the
/// Q^E branch probabilities: (value defect, Z defect, U defect, measure defect).
pub fn scaling_identity(model: &LatticeModel, alpha: f64, opts: &UtilityOptions) -> Result<[f64; 4]> {
    let (qa, ya) = minimal_entropy_measure(model, alpha, opts)?;
    let (q1, y1) = minimal_entropy_measure(model, 1.0, opts)?;
    let n = model.steps();
    let mut mdef = 0.0_f64;
    for k in 0..n {
        for (a, b) in qa.prob_slices()[k].iter().zip(&q1.prob_slices()[k]) {
            mdef = mdef.max((a - b).abs());
        }
    }
    Ok([
        ya.y.map(|v| alpha * v).max_abs_diff(&y1.y),
        ya.z.map(|v| alpha * v).max_abs_diff_through(&y1.z, n),
        ya.u.map(|v| alpha * v).max_abs_diff_through(&y1.u, n),
        mdef,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::tests::config;

    fn jump_model(steps: usize) -> LatticeModel {
        LatticeModel::build(&config(0.4, 0.2, steps, &[(1.0, 0.2)])).unwrap()
    }

    fn jump_claim(model: &LatticeModel) -> Vec<f64> {
        model.terminal_values(|l| 0.5 * (l.jumps[0] >= 1) as u8 as f64)
    }

    #[test]
    fn zero_and_cash_claims() {
        let model = jump_model(2);
        for mode in [SolveMode::Euler, SolveMode::DtConsistent] {
            let opts = UtilityOptions::with_mode(mode);
            let zero = vec![0.0; model.slice_len(2)];
            let r = indifference_solve(&model, &zero, 1.0, Route::Direct, &opts).unwrap();
            assert!(r.pi.max_abs() < 1e-14);
            assert!(r.psi.max_abs() < 1e-14);
            let cash = vec![0.3; model.slice_len(2)];
            for route in [Route::TwoRun, Route::Direct] {
                let r = indifference_solve(&model, &cash, 1.0, route, &opts).unwrap();
                assert!(r.pi.map(|p| p - 0.3).max_abs() < 1e-13, "{mode:?} {route:?}");
                assert!(r.psi.max_abs_through(2) < 1e-12);
            }
        }
    }

    #[test]
    fn routes_agree_on_jump_claim() {
        let model = jump_model(2);
        let b = jump_claim(&model);
        for mode in [SolveMode::Euler, SolveMode::DtConsistent] {
            let c = compare_routes(&model, &b, 1.0, &UtilityOptions::with_mode(mode)).unwrap();
            assert!(c.pi_diff < 1e-10, "{mode:?} {}", c.pi_diff);
            assert!(c.psi_diff < 1e-10, "{mode:?} {}", c.psi_diff);
            assert!(c.pi0 > 0.0 && c.pi0 < 0.5);
        }
    }

    #[test]
    fn cash_translation() {
        let model = jump_model(2);
        let b = jump_claim(&model);
        let bc: Vec<f64> = b.iter().map(|x| x + 0.25).collect();
        let opts = UtilityOptions::with_mode(SolveMode::DtConsistent);
        let r = indifference_solve(&model, &b, 1.0, Route::Direct, &opts).unwrap();
        let rc = indifference_solve(&model, &bc, 1.0, Route::Direct, &opts).unwrap();
        assert!(rc.pi.zip_with(&r.pi, |a, b| a - b - 0.25).max_abs() < 1e-12);
    }

    #[test]
    fn risk_min_is_q_e_expectation() {
        let model = jump_model(2);
        let b = model.terminal_values(|l| (l.jumps[0] >= 1) as u8 as f64);
        let (q_e, _) = minimal_entropy_measure(&model, 1.0, &UtilityOptions::default()).unwrap();
        let rm = risk_min_solve(&model, &q_e, &b).unwrap();
        assert!((rm.y0() - q_e.expect_terminal(&model, &b)).abs() < 1e-14);
        let cash = vec![0.7; model.slice_len(2)];
        let rm = risk_min_solve(&model, &q_e, &cash).unwrap();
        assert!(rm.y.map(|v| v - 0.7).max_abs() < 1e-14);
        assert!(rm.z.max_abs() < 1e-14 && rm.u.max_abs() < 1e-14);
    }

    #[test]
    fn supermartingale_and_time_consistency() {
        let model = jump_model(3);
        let b = model.terminal_values(|l| 0.5 * (l.jumps[0] >= 1) as u8 as f64);
        for mode in [SolveMode::Euler, SolveMode::DtConsistent] {
            let opts = UtilityOptions::with_mode(mode);
            let r = indifference_solve(&model, &b, 1.0, Route::Direct, &opts).unwrap();
            let rep = supermartingale_check(&model, &r);
            assert!(rep.max_drift <= 1e-12);
            assert!(rep.min_drift < -1e-6);
            for rule in [StoppingRule::Horizon, StoppingRule::Deterministic(1), StoppingRule::FirstJump] {
                let tc = time_consistency_check(&model, &b, 1.0, &rule, &opts).unwrap();
                assert!(tc.direct_diff < 1e-10 && tc.two_run_diff < 1e-10, "{mode:?} {rule:?} {tc:?}");
            }
        }
    }

    #[test]
    fn hat_measure_martingale() {
        let model = jump_model(2);
        let b = jump_claim(&model);
        for mode in [SolveMode::Euler, SolveMode::DtConsistent] {
            let (rep, _) = hat_measure_martingale_check(&model, &b, 1.0, &UtilityOptions::with_mode(mode)).unwrap();
            assert!(rep.max_residual < 1e-10, "{mode:?} {rep:?}");
            assert!(rep.compensator_defect < 1e-15, "{mode:?} {rep:?}");
        }
    }

    #[test]
    fn entropic_identity_holds() {
        let model = jump_model(2);
        let b = jump_claim(&model);
        let rep = entropic_problem_identity(&model, &b, 1.0, &UtilityOptions::with_mode(SolveMode::DtConsistent)).unwrap();
        assert!(rep.value_diff < 1e-10 && rep.strategy_diff < 1e-10 && rep.utility_gap < 1e-10, "{rep:?}");
    }

    #[test]
    fn scaling_identity_holds() {
        let model = jump_model(3);
        for mode in [SolveMode::Euler, SolveMode::DtConsistent] {
            for a in [0.5, 2.0] {
                let d = scaling_identity(&model, a, &UtilityOptions::with_mode(mode)).unwrap();
                assert!(d.iter().all(|x| *x < 1e-10), "{mode:?} {a} {d:?}");
            }
        }
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let model = jump_model(2);
        let b = jump_claim(&model);
        let o = UtilityOptions::default();
        assert!(matches!(asymptotics_sweep(&model, &b, &[], &o), Err(Error::EmptyGrid)));
        assert!(asymptotics_sweep(&model, &b, &[0.25, 0.5], &o).is_err());
        assert!(asymptotics_sweep(&model, &b, &[2.0, 0.5], &o).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let x = [0.5, 0.25, 0.125];
        let y: Vec<f64> = x.iter().map(|a: &f64| 3.0 * a.powf(1.5)).collect();
        assert!((log_log_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
        assert!(log_log_slope(&x, &[0.0, 1.0, 2.0]).is_none());
    }
}
