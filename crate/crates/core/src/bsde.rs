//! Backward Picard solver for lattice BSDEs with jumps.
//!
//! At a node with working-measure branch probabilities q and next-slice
//! values Y':
//!
//! * Z is the regression coefficient of Y' on ΔW under q (which is
//!   E[Y'ΔW]/dt under P),
//! * U_j = E[Y' | jump e_j] - E[Y' | no jump],
//! * Y solves y = E[Y'] + f(t, y, Z, U) dt.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, NodeId, Result};
use crate::field::NodeField;
use crate::generator::{GenInput, GeneratorSpec};
use crate::lattice::LatticeModel;
use crate::measure::MeasureChange;
use crate::truncation::{truncate_generator, TruncationProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum Scheme {
    #[default]
    Implicit,
    /// y = E[Y'] + f(t, E[Y'], Z, U) dt.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub enum PicardInit {
    Zero,
    /// Start from E[Y' | node].
    #[default]
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub scheme: Scheme,
    pub init: PicardInit,
    /// Run the truncated route with this profile and assert |Y| <= b(t).
    pub truncation: Option<TruncationProfile>,
    pub parallel: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 200,
            scheme: Scheme::Implicit,
            init: PicardInit::Conditional,
            truncation: None,
            parallel: true,
        }
    }
}

/// Values fixed in advance at some nodes (stopped nodes act as terminal).
pub type Stopped = Vec<Vec<Option<f64>>>;

#[derive(Debug, Clone, Serialize)]
pub struct BsdeSolution {
    pub y: NodeField,
    pub z: NodeField,
    pub u: NodeField,
    /// |y - E[Y'] - f dt| at the returned y.
    pub residual: NodeField,
    pub iterations: Vec<Vec<u32>>,
}

impl BsdeSolution {
    pub fn y0(&self) -> f64 {
        self.y.at(0, 0)
    }

    pub fn terminal(&self) -> &[f64] {
        let n = self.y.slice_count() - 1;
        self.y.slice(n)
    }

    pub fn max_residual(&self) -> f64 {
        self.residual.max_abs()
    }

    pub fn max_iterations(&self) -> u32 {
        self.iterations.iter().flatten().copied().max().unwrap_or(0)
    }
}

/// One-step conditional moments of next-slice values under q.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMoments {
    pub mean: f64,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    /// Jump-outcome probabilities under q, no jump first.
    pub jump_probs: Vec<f64>,
    /// E[ΔW] under q.
    pub dw_mean: Vec<f64>,
}

/// Moments of `next[child(b)]` at node (k, i) under branch probabilities `q`.
pub fn local_moments(model: &LatticeModel, k: usize, i: usize, q: &[f64], next: &[f64]) -> Result<LocalMoments> {
    let d = model.d();
    let m = model.m();
    let diff = model.diffusion_branches();
    let mut mean = 0.0;
    let mut dw_mean = vec![0.0; d];
    let mut jump_probs = vec![0.0; m + 1];
    let mut cond = vec![0.0; m + 1];
    for (b, &qb) in q.iter().enumerate() {
        let y = next[model.child(k, i, b)];
        mean += qb * y;
        let j = b / diff;
        jump_probs[j] += qb;
        cond[j] += qb * y;
        for (acc, &w) in dw_mean.iter_mut().zip(model.dw(b % diff)) {
            *acc += qb * w;
        }
    }
    for j in 0..=m {
        cond[j] /= jump_probs[j];
    }
    let u = (1..=m).map(|j| cond[j] - cond[0]).collect();

    let z = if d == 1 {
        let mut cov = 0.0;
        let mut var = 0.0;
        for (b, &qb) in q.iter().enumerate() {
            let x = model.dw(b % diff)[0] - dw_mean[0];
            cov += qb * (next[model.child(k, i, b)] - mean) * x;
            var += qb * x * x;
        }
        vec![cov / var]
    } else {
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        let mut rhs = nalgebra::DVector::<f64>::zeros(d);
        for (b, &qb) in q.iter().enumerate() {
            let w = model.dw(b % diff);
            let y = next[model.child(k, i, b)] - mean;
            for r in 0..d {
                let xr = w[r] - dw_mean[r];
                rhs[r] += qb * y * xr;
                for c in 0..d {
                    cov[(r, c)] += qb * xr * (w[c] - dw_mean[c]);
                }
            }
        }
        let chol = cov.cholesky().ok_or(Error::Singular(NodeId::new(k, i)))?;
        chol.solve(&rhs).iter().copied().collect()
    };
    Ok(LocalMoments {
        mean,
        z,
        u,
        jump_probs,
        dw_mean,
    })
}

struct NodeOut {
    y: f64,
    z: Vec<f64>,
    u: Vec<f64>,
    residual: f64,
    iterations: u32,
}

/// Solves the BSDE with driver `generator` and terminal values `terminal`
/// under P.
pub fn solve_bsde(
    model: &LatticeModel,
    generator: &GeneratorSpec,
    terminal: &[f64],
    opts: &SolverOptions,
) -> Result<BsdeSolution> {
    solve_bsde_under(model, None, generator, terminal, None, opts)
}

/// Solves under the working measure `measure` (P when `None`). Nodes with a
/// value in `stopped` are treated as terminal.
pub fn solve_bsde_under(
    model: &LatticeModel,
    measure: Option<&MeasureChange>,
    generator: &GeneratorSpec,
    terminal: &[f64],
    stopped: Option<&Stopped>,
    opts: &SolverOptions,
) -> Result<BsdeSolution> {
    let n = model.steps();
    if terminal.len() != model.slice_len(n) {
        return Err(Error::LatticeMismatch);
    }
    if let Some(i) = terminal.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("terminal value at leaf {i} is not finite")));
    }
    let generator = match &opts.truncation {
        Some(profile) => {
            for (i, &b) in terminal.iter().enumerate() {
                if b.abs() > profile.k3 + opts.tol {
                    return Err(Error::BoundViolation {
                        node: NodeId::new(n, i),
                        value: b.abs(),
                        bound: profile.k3,
                    });
                }
            }
            truncate_generator(generator, *profile)?
        }
        None => generator.clone(),
    };
    let dt = model.dt();
    let probs_at = |k: usize, i: usize| -> &[f64] {
        match measure {
            Some(q) => q.probs(k, i),
            None => model.probs(k, i),
        }
    };

    if opts.scheme == Scheme::Implicit {
        let mut max_rate = 0.0_f64;
        let diff = model.diffusion_branches();
        for k in 0..n {
            for i in 0..model.slice_len(k) {
                let jumps: f64 = probs_at(k, i)[diff..].iter().sum();
                max_rate = max_rate.max(jumps / dt);
            }
        }
        if let Some(kf) = generator.y_lipschitz(max_rate) {
            if kf * dt >= 1.0 {
                return Err(Error::StepSize {
                    node: NodeId::new(0, 0),
                    what: "Picard contraction K_f*dt",
                    value: kf * dt,
                    bound: 1.0,
                });
            }
        }
    }

    let d = model.d();
    let m = model.m();
    let sizes = model.slice_sizes();
    let mut y = NodeField::zeros(1, &sizes);
    let mut z = NodeField::zeros(d, &sizes);
    let mut u = NodeField::zeros(m, &sizes);
    let mut residual = NodeField::zeros(1, &sizes);
    let mut iterations: Vec<Vec<u32>> = sizes.iter().map(|&s| vec![0; s]).collect();
    y.slice_mut(n).copy_from_slice(terminal);

    for k in (0..n).rev() {
        let t = model.time(k);
        let next = y.slice(k + 1).to_vec();
        let stop_k = stopped.map(|s| &s[k]);
        let solve_node = |i: usize| -> Result<NodeOut> {
            if let Some(v) = stop_k.and_then(|s| s[i]) {
                return Ok(NodeOut {
                    y: v,
                    z: vec![0.0; d],
                    u: vec![0.0; m],
                    residual: 0.0,
                    iterations: 0,
                });
            }
            let node = NodeId::new(k, i);
            let mo = local_moments(model, k, i, probs_at(k, i), &next)?;
            let rates: Vec<f64> = mo.jump_probs[1..].iter().map(|q| q / dt).collect();
            let f = |yv: f64| {
                generator.eval(&GenInput {
                    node,
                    t,
                    y: yv,
                    z: &mo.z,
                    u: &mo.u,
                    phi: model.phi(k, i),
                    rates: &rates,
                })
            };
            let (yv, iters) = match opts.scheme {
                Scheme::Explicit => (mo.mean + f(mo.mean)? * dt, 1),
                Scheme::Implicit => {
                    let mut cur = match opts.init {
                        PicardInit::Zero => 0.0,
                        PicardInit::Conditional => mo.mean,
                    };
                    let mut it = 0u32;
                    loop {
                        let nxt = mo.mean + f(cur)? * dt;
                        it += 1;
                        if (nxt - cur).abs() <= opts.tol {
                            break (nxt, it);
                        }
                        if it as usize >= opts.max_iter {
                            return Err(Error::PicardNonConvergence {
                                node,
                                last: nxt,
                                previous: cur,
                            });
                        }
                        cur = nxt;
                    }
                }
            };
            let res = match opts.scheme {
                Scheme::Implicit => (yv - mo.mean - f(yv)? * dt).abs(),
                Scheme::Explicit => 0.0,
            };
            if let Some(profile) = &opts.truncation {
                let b = profile.boundary(t);
                if yv.abs() > b + opts.tol {
                    return Err(Error::BoundViolation {
                        node,
                        value: yv.abs(),
                        bound: b,
                    });
                }
            }
            Ok(NodeOut {
                y: yv,
                z: mo.z,
                u: mo.u,
                residual: res,
                iterations: iters,
            })
        };
        let len = model.slice_len(k);
        let outs: Vec<Result<NodeOut>> = if opts.parallel && len >= 512 {
            (0..len).into_par_iter().map(solve_node).collect()
        } else {
            (0..len).map(solve_node).collect()
        };
        for (i, out) in outs.into_iter().enumerate() {
            let out = out?;
            y.set(k, i, out.y);
            z.get_mut(k, i).copy_from_slice(&out.z);
            u.get_mut(k, i).copy_from_slice(&out.u);
            residual.set(k, i, out.residual);
            iterations[k][i] = out.iterations;
        }
    }

    Ok(BsdeSolution {
        y,
        z,
        u,
        residual,
        iterations,
    })
}

/// max over non-terminal nodes of the representation residual
/// |Y'_b - E[Y'] - Z·(ΔW_b - E[ΔW]) - Σ_j U_j (1{b jumps e_j} - q_j)|
/// for the field `values` and its extracted (Z, U), under P or `measure`.
pub fn representation_residual(
    model: &LatticeModel,
    measure: Option<&MeasureChange>,
    values: &NodeField,
) -> Result<f64> {
    let diff = model.diffusion_branches();
    let mut worst = 0.0_f64;
    for k in 0..model.steps() {
        let next = values.slice(k + 1);
        for i in 0..model.slice_len(k) {
            let q = match measure {
                Some(mc) => mc.probs(k, i),
                None => model.probs(k, i),
            };
            let mo = local_moments(model, k, i, q, next)?;
            for b in 0..model.branching() {
                let mut r = next[model.child(k, i, b)] - mo.mean;
                for (c, &w) in model.dw(b % diff).iter().enumerate() {
                    r -= mo.z[c] * (w - mo.dw_mean[c]);
                }
                for j in 0..model.m() {
                    let ind = if b / diff == j + 1 { 1.0 } else { 0.0 };
                    r -= mo.u[j] * (ind - mo.jump_probs[j + 1]);
                }
                worst = worst.max(r.abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::tests::config;

    #[test]
    fn zero_generator_zero_claim() {
        let model = LatticeModel::build(&config(0.4, 0.2, 3, &[(1.0, 0.2)])).unwrap();
        let b = vec![0.0; model.slice_len(3)];
        let sol = solve_bsde(&model, &GeneratorSpec::Zero, &b, &SolverOptions::default()).unwrap();
        assert_eq!(sol.y.max_abs(), 0.0);
        assert_eq!(sol.z.max_abs(), 0.0);
        assert_eq!(sol.u.max_abs(), 0.0);
    }

    #[test]
    fn closed_form_entropic_without_marks() {
        let model = LatticeModel::build(&config(0.4, 0.2, 4, &[])).unwrap();
        let b = vec![0.0; model.slice_len(4)];
        let sol = solve_bsde(&model, &GeneratorSpec::Entropic { alpha: 2.0 }, &b, &SolverOptions::default()).unwrap();
        assert!((sol.y0() + 0.04).abs() < 1e-15);
        for k in 0..=4 {
            for i in 0..model.slice_len(k) {
                let expect = -(1.0 - model.time(k)) * 0.16 / 4.0;
                assert!((sol.y.at(k, i) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_generator_is_conditional_expectation_and_representation_is_exact() {
        let model = LatticeModel::build(&config(0.3, 0.25, 3, &[(1.0, 0.2), (-0.5, 0.3)])).unwrap();
        // separable claim: function of price plus function of jumps
        let b = model.terminal_values(|l| l.s[0] * l.s[0] + 0.3 * l.jumps[0] as f64 - 0.2 * l.jumps[1] as f64);
        let sol = solve_bsde(&model, &GeneratorSpec::Zero, &b, &SolverOptions::default()).unwrap();
        let p = MeasureChange::identity(&model);
        assert!((sol.y0() - p.expect_terminal(&model, &b)).abs() < 1e-14);
        assert!(representation_residual(&model, None, &sol.y).unwrap() < 1e-12);
    }

    #[test]
    fn picard_initializations_agree() {
        let model = LatticeModel::build(&config(0.4, 0.2, 3, &[(1.0, 0.3)])).unwrap();
        let b = model.terminal_values(|l| 0.5 * (l.jumps[0] >= 1) as u8 as f64);
        let profile = TruncationProfile::exponential_utility(0.16, 1.0, 0.5, 1.0).unwrap();
        let mut opts = SolverOptions {
            truncation: Some(profile),
            ..Default::default()
        };
        let g = GeneratorSpec::Entropic { alpha: 1.0 };
        let a = solve_bsde(&model, &g, &b, &opts).unwrap();
        opts.init = PicardInit::Zero;
        let c = solve_bsde(&model, &g, &b, &opts).unwrap();
        assert!(a.y.max_abs_diff(&c.y) < 1e-10);
        assert!(a.max_residual() < 1e-11);
    }

    #[test]
    fn nonconvergence_reports_node() {
        let model = LatticeModel::build(&config(0.0, 0.2, 1, &[])).unwrap();
        let g = GeneratorSpec::Custom(std::sync::Arc::new(|inp| 3.0 * inp.y.sin() + 1.0));
        let opts = SolverOptions {
            max_iter: 3,
            ..Default::default()
        };
        let err = solve_bsde(&model, &g, &[0.0, 0.0], &opts).unwrap_err();
        assert!(matches!(err, Error::PicardNonConvergence { .. }), "{err}");
    }

    #[test]
    fn one_step_jump_claim_euler_vs_exact() {
        // φ = 0, B = 1{jump}, p = 0.1, α = 1
        let model = LatticeModel::build(&config(0.0, 0.2, 1, &[(1.0, 0.1)])).unwrap();
        let b = model.terminal_values(|l| l.jumps[0] as f64);
        let sol = solve_bsde(&model, &GeneratorSpec::Entropic { alpha: 1.0 }, &b, &SolverOptions::default()).unwrap();
        // Euler: 0.1 + 0.1 (e - 2)
        assert!((sol.y0() - (0.1 + 0.1 * (std::f64::consts::E - 2.0))).abs() < 1e-15);
        assert!((sol.u.at(0, 0) - 1.0).abs() < 1e-15);
        let exact = (0.1 * std::f64::consts::E + 0.9).ln();
        assert!((sol.y0() - exact).abs() < 0.1);
    }
}
