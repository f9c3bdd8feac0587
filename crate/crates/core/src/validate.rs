//! Full-scan validation of a built lattice.

use serde::Serialize;

use crate::error::{Error, NodeId, Result};
use crate::lattice::LatticeModel;

/// Tolerance for probability sums and martingale residuals.
pub const SCAN_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ValidationReport {
    pub nodes: usize,
    /// Realized c_ν = max ζ.
    pub c_nu: f64,
    pub min_branch_prob: f64,
    /// max |Σ p - 1| over nodes.
    pub max_prob_sum_residual: f64,
    /// max |E^P[ΔW | node]| over nodes and components.
    pub max_dw_residual: f64,
    /// max |E^P[1{jump = e_j} | node] - ζλ_j dt|.
    pub max_jump_residual: f64,
    /// max |p(sign, jump) - p(sign) p(jump)|.
    pub max_independence_residual: f64,
    pub min_price: f64,
}

/// Checks every lattice invariant by exhaustive scan.
///
/// Fails with the list of offending nodes; succeeds with the realized
/// constants and residuals.
pub fn validate_model(model: &LatticeModel) -> Result<ValidationReport> {
    let d = model.d();
    let m = model.m();
    let diff = model.diffusion_branches();
    let br = model.branching();
    let dt = model.dt();
    let mut violations = Vec::new();
    let mut report = ValidationReport {
        nodes: model.node_count(),
        c_nu: model.c_nu(),
        min_branch_prob: f64::INFINITY,
        max_prob_sum_residual: 0.0,
        max_dw_residual: 0.0,
        max_jump_residual: 0.0,
        max_independence_residual: 0.0,
        min_price: f64::INFINITY,
    };
    let mut push = |node: NodeId, msg: String| {
        if violations.len() < 50 {
            violations.push(format!("{msg} at node {}", model.describe(node)));
        }
    };

    for k in 0..=model.steps() {
        for i in 0..model.slice_len(k) {
            let node = NodeId::new(k, i);
            for &s in model.s(k, i) {
                report.min_price = report.min_price.min(s);
                if !(s > 0.0) {
                    push(node, format!("nonpositive asset price {s}"));
                }
            }
            for &z in model.zeta(k, i) {
                if !(z >= 0.0 && z <= model.c_nu()) {
                    push(node, format!("intensity {z} outside [0, c_nu]"));
                }
            }
            if k == model.steps() {
                continue;
            }
            let p = model.probs(k, i);
            let mut total = 0.0;
            for &pb in p {
                report.min_branch_prob = report.min_branch_prob.min(pb);
                total += pb;
            }
            let r = (total - 1.0).abs();
            report.max_prob_sum_residual = report.max_prob_sum_residual.max(r);
            if r > SCAN_TOL {
                push(node, format!("branch probabilities sum to {total}"));
            }

            let no_jump: f64 = p[..diff].iter().sum();
            if !(no_jump > 0.0) {
                push(node, "no-jump branch nonpositive".to_string());
            }
            if p.iter().any(|&pb| !(pb > 0.0)) {
                push(node, "nonpositive branch probability".to_string());
            }

            for c in 0..d {
                let mean: f64 = (0..br)
                    .map(|b| p[b] * model.dw(model.sign_of(b))[c])
                    .sum();
                report.max_dw_residual = report.max_dw_residual.max(mean.abs());
                if mean.abs() > SCAN_TOL {
                    push(node, format!("E[dW_{c}] = {mean:e}"));
                }
            }

            let mut sign_marg = vec![0.0; diff];
            let mut jump_marg = vec![0.0; m + 1];
            for b in 0..br {
                sign_marg[b % diff] += p[b];
                jump_marg[b / diff] += p[b];
            }
            for j in 0..m {
                let r = (jump_marg[j + 1] - model.jump_mass(k, i, j)).abs();
                report.max_jump_residual = report.max_jump_residual.max(r);
                if r > SCAN_TOL {
                    push(node, format!("jump probability of mark {j} differs from zeta*lambda*dt by {r:e}"));
                }
            }
            for s in 0..diff {
                let r = (sign_marg[s] - 1.0 / diff as f64).abs();
                if r > SCAN_TOL {
                    push(node, format!("sign pattern {s} not equiprobable"));
                }
            }
            for b in 0..br {
                let r = (p[b] - sign_marg[b % diff] * jump_marg[b / diff]).abs();
                report.max_independence_residual = report.max_independence_residual.max(r);
                if r > SCAN_TOL {
                    push(node, "jump branch not independent of diffusion sign".to_string());
                }
            }
            let _ = dt;
        }
    }

    if violations.is_empty() {
        Ok(report)
    } else {
        Err(Error::Validation(violations))
    }
}
