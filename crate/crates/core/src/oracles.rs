//! Brute-force reference solvers.
//!
//! * [`entropic_recursion`]: exact one-step certainty equivalent
//!   `Y = min_θ (1/α) log E[exp(α(Y' - θ·ΔŴ))]`, by Newton on the
//!   log-sum-exp objective.
//! * [`brute_force_primal`]: backward induction on the expected utility
//!   itself, parametrized by `K = e^{αY}`; shares no code with the BSDE
//!   solver or with the recursion above.
//! * [`brute_force_dual`]: maximizes `α E^Q[B] - H(Q|P)` over martingale
//!   measures whose diffusion tilt is that of the minimal martingale measure
//!   and whose jump tilts range over a geometric grid.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bsde::Stopped;
use crate::error::{Error, NodeId, Result};
use crate::field::NodeField;
use crate::lattice::{LatticeModel, StrategyField};
use crate::measure::{minimal_martingale_measure, MeasureChange, MeasureLabel};

/// Gradient tolerance of the per-node optimizers.
pub const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX: usize = 100;

/// Output of [`entropic_recursion`].
#[derive(Debug, Clone, Serialize)]
pub struct EntropicSolution {
    pub y: NodeField,
    /// Minimizing θ per node.
    pub theta: NodeField,
    /// (1/α) ln E[w | jump e_j] with w the optimal one-step tilt.
    pub u: NodeField,
    /// Same for every jump outcome, no jump first (m+1 entries).
    pub u_all: NodeField,
    /// Branch probabilities of the optimal one-step tilt
    /// q_b exp(α(Y'_b - θ·ΔŴ_b - Y)), per non-terminal slice. Stopped nodes
    /// keep the base probabilities.
    pub tilt: Vec<Vec<f64>>,
    pub newton_iterations: usize,
}

impl EntropicSolution {
    /// The optimal tilt as a measure change.
    pub fn tilt_measure(&self, model: &LatticeModel, label: MeasureLabel) -> Result<MeasureChange> {
        MeasureChange::from_probs(model, label, self.tilt.clone())
    }
}

struct LseStep {
    value: f64,
    theta: Vec<f64>,
    iterations: usize,
}

/// Minimizes F(θ) = log Σ_b q_b exp(α(v_b - θ·x_b)) / α.
fn minimize_lse(q: &[f64], v: &[f64], x: &[Vec<f64>], alpha: f64, start: &[f64], node: NodeId) -> Result<LseStep> {
    let d = start.len();
    let eval = |theta: &[f64]| -> (f64, Vec<f64>, DMatrix<f64>) {
        let a: Vec<f64> = v
            .iter()
            .zip(x)
            .map(|(vb, xb)| alpha * (vb - theta.iter().zip(xb).map(|(t, c)| t * c).sum::<f64>()))
            .collect();
        let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = q.iter().zip(&a).map(|(qb, ab)| qb * (ab - mx).exp()).collect();
        let s: f64 = w.iter().sum();
        let mut mean = vec![0.0; d];
        for (wb, xb) in w.iter().zip(x) {
            for c in 0..d {
                mean[c] += wb / s * xb[c];
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for (wb, xb) in w.iter().zip(x) {
            for r in 0..d {
                for c in 0..d {
                    cov[(r, c)] += wb / s * (xb[r] - mean[r]) * (xb[c] - mean[c]);
                }
            }
        }
        ((mx + s.ln()) / alpha, mean, cov)
    };
    let mut theta = start.to_vec();
    let (mut f, mut mean, mut cov) = eval(&theta);
    for it in 0..NEWTON_MAX {
        // ∇F = -E_w[x], ∇²F = α Cov_w(x)
        let gnorm = mean.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= NEWTON_TOL {
            return Ok(LseStep {
                value: f,
                theta,
                iterations: it,
            });
        }
        let step = cov
            .clone()
            .cholesky()
            .ok_or(Error::Singular(node))?
            .solve(&DVector::from_column_slice(&mean));
        let scale = 1.0 + theta.iter().fold(0.0_f64, |a, t| a.max(t.abs()));
        if step.amax() / alpha <= 1e-15 * scale {
            return Ok(LseStep {
                value: f,
                theta,
                iterations: it,
            });
        }
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s / alpha).collect();
            let (fc, mc, cc) = eval(&cand);
            let gc = mc.iter().map(|g| g * g).sum::<f64>().sqrt();
            if fc <= f + 1e-15 * f.abs().max(1.0) || gc < gnorm || t < 1e-8 {
                theta = cand;
                f = fc;
                mean = mc;
                cov = cc;
                break;
            }
            t *= 0.5;
        }
    }
    let gnorm = mean.iter().map(|g| g * g).sum::<f64>().sqrt();
    if gnorm <= 1e-11 {
        Ok(LseStep {
            value: f,
            theta,
            iterations: NEWTON_MAX,
        })
    } else {
        Err(Error::OptimizerStall { node, gradient: gnorm })
    }
}

fn hat_increments(model: &LatticeModel, k: usize, i: usize) -> Vec<Vec<f64>> {
    (0..model.branching())
        .map(|b| {
            let mut x = vec![0.0; model.d()];
            model.hat_increment(k, i, b, &mut x);
            x
        })
        .collect()
}

/// Exact entropic recursion under P (or `measure`), with optional stopped
/// nodes treated as terminal. The Newton start is φ/α under P and 0 under
/// any other measure.
pub fn entropic_recursion(
    model: &LatticeModel,
    terminal: &[f64],
    alpha: f64,
    measure: Option<&MeasureChange>,
    stopped: Option<&Stopped>,
) -> Result<EntropicSolution> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    let n = model.steps();
    if terminal.len() != model.slice_len(n) {
        return Err(Error::LatticeMismatch);
    }
    let d = model.d();
    let m = model.m();
    let diff = model.diffusion_branches();
    let sizes = model.slice_sizes();
    let mut y = NodeField::zeros(1, &sizes);
    let mut theta = NodeField::zeros(d, &sizes);
    let mut u = NodeField::zeros(m, &sizes);
    let mut u_all = NodeField::zeros(m + 1, &sizes);
    let br = model.branching();
    let mut tilt: Vec<Vec<f64>> = (0..n).map(|k| vec![0.0; model.slice_len(k) * br]).collect();
    let mut iters = 0;
    y.slice_mut(n).copy_from_slice(terminal);
    for k in (0..n).rev() {
        for i in 0..model.slice_len(k) {
            let node = NodeId::new(k, i);
            let q = match measure {
                Some(mc) => mc.probs(k, i),
                None => model.probs(k, i),
            };
            if let Some(v) = stopped.and_then(|s| s[k][i]) {
                y.set(k, i, v);
                tilt[k][i * br..(i + 1) * br].copy_from_slice(q);
                continue;
            }
            let v: Vec<f64> = (0..model.branching()).map(|b| y.at(k + 1, model.child(k, i, b))).collect();
            let x = hat_increments(model, k, i);
            let start: Vec<f64> = match measure {
                None => model.phi(k, i).iter().map(|p| p / alpha).collect(),
                Some(_) => vec![0.0; d],
            };
            let step = minimize_lse(q, &v, &x, alpha, &start, node)?;
            iters = iters.max(step.iterations);
            y.set(k, i, step.value);
            theta.get_mut(k, i).copy_from_slice(&step.theta);
            let mut num = vec![0.0; m + 1];
            let mut den = vec![0.0; m + 1];
            let w = &mut tilt[k][i * br..(i + 1) * br];
            for b in 0..br {
                let a = alpha * (v[b] - step.theta.iter().zip(&x[b]).map(|(t, c)| t * c).sum::<f64>() - step.value);
                w[b] = q[b] * a.exp();
                num[b / diff] += w[b];
                den[b / diff] += q[b];
            }
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= total);
            for j in 0..=m {
                let uj = (num[j] / den[j]).ln() / alpha;
                u_all.get_mut(k, i)[j] = uj;
                if j > 0 {
                    u.get_mut(k, i)[j - 1] = uj;
                }
            }
        }
    }
    Ok(EntropicSolution {
        y,
        theta,
        u,
        u_all,
        tilt,
        newton_iterations: iters,
    })
}

/// Output of [`brute_force_primal`].
#[derive(Debug, Clone, Serialize)]
pub struct PrimalResult {
    /// Optimal expected utility from wealth x at the root.
    pub value: f64,
    /// Certainty-equivalent field Y with value -e^{-αx} e^{αY}.
    pub y: NodeField,
    pub strategy: NodeField,
    /// Nodes where Newton stalled and the bracketing fallback was used.
    pub fallbacks: usize,
}

impl PrimalResult {
    pub fn strategy_field(&self) -> StrategyField {
        StrategyField::new(self.strategy.clone())
    }
}

/// G(θ) = Σ_c p_c K_c e^{-αθ·x_c}; returns (G, ∇G, ∇²G).
fn k_objective(p: &[f64], kv: &[f64], x: &[Vec<f64>], alpha: f64, theta: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
    let d = theta.len();
    let mut g = 0.0;
    let mut grad = vec![0.0; d];
    let mut hess = DMatrix::zeros(d, d);
    for ((pc, kc), xc) in p.iter().zip(kv).zip(x) {
        let e = pc * kc * (-alpha * theta.iter().zip(xc).map(|(t, c)| t * c).sum::<f64>()).exp();
        g += e;
        for r in 0..d {
            grad[r] -= alpha * e * xc[r];
            for c in 0..d {
                hess[(r, c)] += alpha * alpha * e * xc[r] * xc[c];
            }
        }
    }
    (g, grad, hess)
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
        if hi - lo < 1e-15 * (1.0 + lo.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Exact backward induction for sup_θ E[-exp(-α(x + Σθ·ΔŴ - B))].
pub fn brute_force_primal(model: &LatticeModel, terminal: &[f64], alpha: f64, wealth: f64) -> Result<PrimalResult> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    let n = model.steps();
    if terminal.len() != model.slice_len(n) {
        return Err(Error::LatticeMismatch);
    }
    let d = model.d();
    let sizes = model.slice_sizes();
    // K = e^{αY}
    let mut kf = NodeField::zeros(1, &sizes);
    let mut strat = NodeField::zeros(d, &sizes);
    for (i, &b) in terminal.iter().enumerate() {
        kf.set(n, i, (alpha * b).exp());
    }
    let mut fallbacks = 0;
    for k in (0..n).rev() {
        for i in 0..model.slice_len(k) {
            let node = NodeId::new(k, i);
            let p = model.probs(k, i);
            let kv: Vec<f64> = model.children(k, i).map(|c| kf.at(k + 1, c)).collect();
            let x = hat_increments(model, k, i);
            let mut theta: Vec<f64> = model.phi(k, i).iter().map(|v| v / alpha).collect();
            let (mut g, mut grad, mut hess) = k_objective(p, &kv, &x, alpha, &theta);
            let mut converged = false;
            for _ in 0..NEWTON_MAX {
                let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                if gnorm <= NEWTON_TOL * g {
                    converged = true;
                    break;
                }
                let Some(chol) = hess.clone().cholesky() else { break };
                let step = chol.solve(&DVector::from_column_slice(&grad));
                let scale = 1.0 + theta.iter().fold(0.0_f64, |a, t| a.max(t.abs()));
                if step.amax() <= 1e-15 * scale {
                    converged = true;
                    break;
                }
                let mut t = 1.0;
                let mut moved = false;
                while t > 1e-10 {
                    let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
                    let (gc, gr, hc) = k_objective(p, &kv, &x, alpha, &cand);
                    let grn = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if gc <= g || grn < gnorm {
                        theta = cand;
                        g = gc;
                        grad = gr;
                        hess = hc;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            if !converged {
                // coordinate-wise golden section around the current point
                fallbacks += 1;
                for _sweep in 0..50 {
                    for c in 0..d {
                        let f = |v: f64| {
                            let mut th = theta.clone();
                            th[c] = v;
                            k_objective(p, &kv, &x, alpha, &th).0
                        };
                        let span = 10.0 / alpha.max(1e-3) + theta[c].abs();
                        theta[c] = golden_section(f, theta[c] - span, theta[c] + span);
                    }
                }
                let (gc, gr, _) = k_objective(p, &kv, &x, alpha, &theta);
                g = gc;
                let gnorm = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if gnorm > 1e-7 * g {
                    return Err(Error::OptimizerStall { node, gradient: gnorm / g });
                }
            }
            kf.set(k, i, g);
            strat.get_mut(k, i).copy_from_slice(&theta);
        }
    }
    let y = kf.map(|kv| kv.ln() / alpha);
    Ok(PrimalResult {
        value: -(-alpha * wealth).exp() * kf.at(0, 0),
        y,
        strategy: strat,
        fallbacks,
    })
}

/// E[-exp(-α(x + Σθ·ΔŴ - B))] for a given strategy.
pub fn expected_utility(model: &LatticeModel, strategy: &StrategyField, terminal: &[f64], alpha: f64, wealth: f64) -> f64 {
    let n = model.steps();
    let mut next: Vec<f64> = terminal.iter().map(|b| (alpha * b).exp()).collect();
    let mut x = vec![0.0; model.d()];
    for k in (0..n).rev() {
        let cur: Vec<f64> = (0..model.slice_len(k))
            .map(|i| {
                let th = strategy.at(k, i);
                model
                    .probs(k, i)
                    .iter()
                    .enumerate()
                    .map(|(b, &pb)| {
                        model.hat_increment(k, i, b, &mut x);
                        let g: f64 = th.iter().zip(&x).map(|(t, c)| t * c).sum();
                        pb * (-alpha * g).exp() * next[model.child(k, i, b)]
                    })
                    .sum()
            })
            .collect();
        next = cur;
    }
    -(-alpha * wealth).exp() * next[0]
}

/// Geometric grid of jump-tilt factors.
#[derive(Debug, Clone)]
pub struct DualGrid {
    pub ratio: f64,
    /// Factors range over [e^{-span}, e^{span}].
    pub span: f64,
    /// Optional extra candidate factor per node (one per mark).
    pub extra: Option<NodeField>,
}

impl Default for DualGrid {
    fn default() -> Self {
        Self {
            ratio: 1.02,
            span: 4.0,
            extra: None,
        }
    }
}

impl DualGrid {
    pub fn factors(&self) -> Vec<f64> {
        let n = (self.span / self.ratio.ln()).floor() as i64;
        (-n..=n).map(|e| self.ratio.powi(e as i32)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DualResult {
    pub best: MeasureChange,
    pub objective: f64,
    /// Chosen tilt factor per node.
    pub factors: NodeField,
    pub candidates_per_node: usize,
}

/// Largest problem the dual grid search accepts.
pub const DUAL_MAX_STEPS: usize = 3;
pub const DUAL_MAX_MARKS: usize = 1;

/// Grid maximization of α E^Q[B] - H(Q|P) by backward dynamic programming
/// over per-node jump tilts (exact for the product grid since entropy
/// splits along the lattice).
pub fn brute_force_dual(model: &LatticeModel, terminal: &[f64], alpha: f64, grid: &DualGrid) -> Result<DualResult> {
    if model.steps() > DUAL_MAX_STEPS || model.m() > DUAL_MAX_MARKS {
        let per = grid.factors().len() as u128;
        return Err(Error::Budget {
            nodes: (model.node_count() as u128) * per,
            budget: 0,
        });
    }
    if !(grid.ratio > 1.0 && grid.span > 0.0) {
        return Err(Error::InvalidArgument("grid ratio must exceed 1 and span be positive".into()));
    }
    let phat = minimal_martingale_measure(model)?;
    let n = model.steps();
    let m = model.m();
    let diff = model.diffusion_branches();
    let base = grid.factors();
    let sizes = model.slice_sizes();
    let mut chosen = NodeField::zeros(m.max(1), &sizes);
    let mut value: Vec<f64> = terminal.iter().map(|b| alpha * b).collect();
    for k in (0..n).rev() {
        let mut cur = vec![0.0; model.slice_len(k)];
        for i in 0..model.slice_len(k) {
            let sd = phat.sign_dist(model, k, i);
            let p = model.probs(k, i);
            let mut cands = base.clone();
            if let Some(extra) = &grid.extra {
                if m > 0 {
                    cands.push(extra.get(k, i)[0]);
                }
            }
            if m == 0 {
                cands = vec![1.0];
            }
            let mut best = (f64::NEG_INFINITY, 1.0);
            for &c in &cands {
                let jd = if m == 0 {
                    vec![1.0]
                } else {
                    let pj = model.jump_mass(k, i, 0);
                    if pj * c >= 1.0 {
                        continue;
                    }
                    vec![1.0 - pj * c, pj * c]
                };
                let mut obj = 0.0;
                for b in 0..model.branching() {
                    let qb = sd[b % diff] * jd[b / diff];
                    obj += qb * (value[model.child(k, i, b)] - (qb / p[b]).ln());
                }
                // strict improvement keeps the lowest grid index on ties
                if obj > best.0 {
                    best = (obj, c);
                }
            }
            cur[i] = best.0;
            chosen.get_mut(k, i)[0] = best.1;
        }
        value = cur;
    }
    let best = MeasureChange::product(model, MeasureLabel::Custom("dual grid optimum".into()), |k, i| {
        let sd = phat.sign_dist(model, k, i);
        let jd = if m == 0 {
            vec![1.0]
        } else {
            let pj = model.jump_mass(k, i, 0) * chosen.get(k, i)[0];
            vec![1.0 - pj, pj]
        };
        Ok((sd, jd))
    })?;
    Ok(DualResult {
        best,
        objective: value[0],
        factors: chosen,
        candidates_per_node: base.len() + usize::from(grid.extra.is_some()),
    })
}
