//! Equivalent measures on the lattice.
//!
//! A [`MeasureChange`] stores the transformed branch probabilities of every
//! non-terminal node; per-branch density factors, cumulative densities and
//! the transformed compensator are derived from them. All measures built
//! here keep the diffusion sign and the jump outcome independent within a
//! step, so a change is described per node by a sign distribution and a jump
//! distribution.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, NodeId, Result};
use crate::field::{stable_sum, NodeField};
use crate::generator::hat_tilt;
use crate::lattice::LatticeModel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum MeasureLabel {
    P,
    /// Minimal martingale measure.
    PHat,
    /// Minimal entropy martingale measure.
    QE,
    /// Dual optimizer for a liability.
    QEB,
    /// Measure under which the indifference value is a martingale.
    QHatB,
    Custom(String),
}

impl fmt::Display for MeasureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeasureLabel::P => write!(f, "P"),
            MeasureLabel::PHat => write!(f, "P-hat"),
            MeasureLabel::QE => write!(f, "Q^E"),
            MeasureLabel::QEB => write!(f, "Q^E,B"),
            MeasureLabel::QHatB => write!(f, "Q-hat^B"),
            MeasureLabel::Custom(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeasureChange {
    label: MeasureLabel,
    branching: usize,
    probs: Vec<Vec<f64>>,
    q_mass: NodeField,
    p_mass: NodeField,
    zeta: NodeField,
}

impl MeasureChange {
    /// P itself.
    pub fn identity(model: &LatticeModel) -> Self {
        Self::from_probs(model, MeasureLabel::P, model.prob_slices()[..model.steps()].to_vec())
            .expect("P is a valid measure")
    }

    /// Builds a change from transformed branch probabilities (one vector of
    /// `n * branching` entries per non-terminal slice).
    pub fn from_probs(model: &LatticeModel, label: MeasureLabel, probs: Vec<Vec<f64>>) -> Result<Self> {
        let br = model.branching();
        if probs.len() != model.steps() {
            return Err(Error::LatticeMismatch);
        }
        for (k, slice) in probs.iter().enumerate() {
            if slice.len() != model.slice_len(k) * br {
                return Err(Error::LatticeMismatch);
            }
            for (i, q) in slice.chunks(br).enumerate() {
                let total: f64 = q.iter().sum();
                if q.iter().any(|&x| !(x > 0.0)) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Validation(vec![format!(
                        "measure {label}: branch probabilities at node {} are not a strictly positive distribution",
                        model.describe(NodeId::new(k, i))
                    )]));
                }
            }
        }
        let q_mass = forward_mass(model, |k, i| &probs[k][i * br..(i + 1) * br]);
        let p_mass = forward_mass(model, |k, i| model.probs(k, i));
        let m = model.m();
        let diff = model.diffusion_branches();
        let mut zeta = model.zeros(m);
        for k in 0..model.steps() {
            for i in 0..model.slice_len(k) {
                let q = &probs[k][i * br..(i + 1) * br];
                for j in 0..m {
                    let qj: f64 = q[(j + 1) * diff..(j + 2) * diff].iter().sum();
                    let pj = model.jump_mass(k, i, j);
                    let z = if pj > 0.0 { model.zeta(k, i)[j] * qj / pj } else { 0.0 };
                    zeta.get_mut(k, i)[j] = z;
                }
            }
        }
        Ok(Self {
            label,
            branching: br,
            probs,
            q_mass,
            p_mass,
            zeta,
        })
    }

    /// Product-form change: `node_dist(k, i)` returns the sign distribution
    /// (2^d entries) and the jump distribution (m+1 entries, no jump first).
    pub fn product(
        model: &LatticeModel,
        label: MeasureLabel,
        node_dist: impl Fn(usize, usize) -> Result<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let diff = model.diffusion_branches();
        let br = model.branching();
        let mut probs = Vec::with_capacity(model.steps());
        for k in 0..model.steps() {
            let mut slice = vec![0.0; model.slice_len(k) * br];
            for i in 0..model.slice_len(k) {
                let (sd, jd) = node_dist(k, i)?;
                for b in 0..br {
                    slice[i * br + b] = sd[b % diff] * jd[b / diff];
                }
            }
            probs.push(slice);
        }
        Self::from_probs(model, label, probs)
    }

    pub fn label(&self) -> &MeasureLabel {
        &self.label
    }

    pub fn relabel(mut self, label: MeasureLabel) -> Self {
        self.label = label;
        self
    }

    pub fn probs(&self, k: usize, i: usize) -> &[f64] {
        &self.probs[k][i * self.branching..(i + 1) * self.branching]
    }

    pub fn prob_slices(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// Per-branch density factor q/p.
    pub fn factor(&self, model: &LatticeModel, k: usize, i: usize, b: usize) -> f64 {
        self.probs(k, i)[b] / model.probs(k, i)[b]
    }

    /// Cumulative density dQ/dP restricted to the node's time slice.
    pub fn density(&self, k: usize, i: usize) -> f64 {
        self.q_mass.at(k, i) / self.p_mass.at(k, i)
    }

    pub fn density_field(&self) -> NodeField {
        self.q_mass.zip_with(&self.p_mass, |q, p| q / p)
    }

    /// Q-probability of reaching each node.
    pub fn mass(&self) -> &NodeField {
        &self.q_mass
    }

    /// Transformed compensator density ζ'(node, mark).
    pub fn zeta(&self, k: usize, i: usize) -> &[f64] {
        self.zeta.get(k, i)
    }

    pub fn zeta_field(&self) -> &NodeField {
        &self.zeta
    }

    /// Jump-outcome distribution at a node (no jump first).
    pub fn jump_dist(&self, model: &LatticeModel, k: usize, i: usize) -> Vec<f64> {
        let diff = model.diffusion_branches();
        let q = self.probs(k, i);
        (0..=model.m())
            .map(|j| q[j * diff..(j + 1) * diff].iter().sum())
            .collect()
    }

    /// Diffusion sign distribution at a node.
    pub fn sign_dist(&self, model: &LatticeModel, k: usize, i: usize) -> Vec<f64> {
        let diff = model.diffusion_branches();
        let mut out = vec![0.0; diff];
        for (b, &q) in self.probs(k, i).iter().enumerate() {
            out[b % diff] += q;
        }
        out
    }

    /// E^Q of a terminal variable.
    pub fn expect_terminal(&self, model: &LatticeModel, values: &[f64]) -> f64 {
        let n = model.steps();
        stable_sum((0..model.slice_len(n)).map(|i| self.q_mass.at(n, i) * values[i]))
    }

    /// max over slices of |E^P[density] - 1|.
    pub fn normalization_drift(&self, model: &LatticeModel) -> f64 {
        (0..=model.steps())
            .map(|k| {
                let s = stable_sum((0..model.slice_len(k)).map(|i| self.q_mass.at(k, i)));
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Density along the path to each node as the product of branch factors.
    /// Trees only.
    pub fn path_density(&self, model: &LatticeModel) -> Result<NodeField> {
        if !model.is_tree() {
            return Err(Error::NotATree);
        }
        let mut out = model.zeros(1);
        out.set(0, 0, 1.0);
        for k in 0..model.steps() {
            for i in 0..model.slice_len(k) {
                let d = out.at(k, i);
                for b in 0..model.branching() {
                    let c = model.child(k, i, b);
                    out.set(k + 1, c, d * self.factor(model, k, i, b));
                }
            }
        }
        Ok(out)
    }
}

fn forward_mass<'a>(model: &LatticeModel, probs: impl Fn(usize, usize) -> &'a [f64]) -> NodeField {
    let mut mass = model.zeros(1);
    mass.set(0, 0, 1.0);
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let w = mass.at(k, i);
            for (b, &q) in probs(k, i).iter().enumerate() {
                let c = model.child(k, i, b);
                let cur = mass.at(k + 1, c);
                mass.set(k + 1, c, cur + w * q);
            }
        }
    }
    mass
}

fn diffusion_tilt(model: &LatticeModel, k: usize, i: usize) -> Result<Vec<f64>> {
    let diff = model.diffusion_branches();
    let phi = model.phi(k, i);
    (0..diff)
        .map(|s| {
            let dw = model.dw(s);
            let f = 1.0 - phi.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
            if f > 0.0 {
                Ok(f / diff as f64)
            } else {
                Err(Error::StepSize {
                    node: NodeId::new(k, i),
                    what: "diffusion tilt 1 - phi*dW",
                    value: f,
                    bound: 0.0,
                })
            }
        })
        .collect()
}

fn p_jump_dist(model: &LatticeModel, k: usize, i: usize) -> Vec<f64> {
    let m = model.m();
    let mut out = vec![0.0; m + 1];
    for j in 0..m {
        out[j + 1] = model.jump_mass(k, i, j);
    }
    out[0] = 1.0 - out[1..].iter().sum::<f64>();
    out
}

/// Minimal martingale measure: diffusion factor 1 - φ·ΔW, jump factors 1.
pub fn minimal_martingale_measure(model: &LatticeModel) -> Result<MeasureChange> {
    MeasureChange::product(model, MeasureLabel::PHat, |k, i| {
        Ok((diffusion_tilt(model, k, i)?, p_jump_dist(model, k, i)))
    })
}

fn tilted_jumps(
    model: &LatticeModel,
    k: usize,
    i: usize,
    base: &[f64],
    factor: impl Fn(usize) -> Result<f64>,
) -> Result<Vec<f64>> {
    let m = model.m();
    let mut out = vec![0.0; m + 1];
    let mut tilted = 0.0;
    for j in 0..m {
        out[j + 1] = base[j + 1] * factor(j)?;
        tilted += out[j + 1];
    }
    // no-jump factor (1 - Σ tilted)/(1 - Σ base)
    out[0] = 1.0 - tilted;
    if !(out[0] > 0.0) {
        return Err(Error::StepSize {
            node: NodeId::new(k, i),
            what: "no-jump tilt factor",
            value: out[0] / base[0],
            bound: 0.0,
        });
    }
    Ok(out)
}

fn exp_guarded(x: f64, node: NodeId) -> Result<f64> {
    if x.abs() > 700.0 || !x.is_finite() {
        Err(Error::Overflow { node, value: x.abs() })
    } else {
        Ok(x.exp())
    }
}

/// Combined change with diffusion factor 1 - φ·ΔW, jump factor e^{αU_j}
/// and the no-jump factor renormalizing each step.
pub fn exponential_tilt_from_u(model: &LatticeModel, u: &NodeField, alpha: f64) -> Result<MeasureChange> {
    MeasureChange::product(model, MeasureLabel::QEB, |k, i| {
        let node = NodeId::new(k, i);
        let uk = u.get(k, i);
        Ok((
            diffusion_tilt(model, k, i)?,
            tilted_jumps(model, k, i, &p_jump_dist(model, k, i), |j| exp_guarded(alpha * uk[j], node))?,
        ))
    })
}

/// Jump part of [`exponential_tilt_from_u`] alone (no diffusion tilt).
pub fn jump_tilt_from_u(model: &LatticeModel, u: &NodeField, alpha: f64) -> Result<MeasureChange> {
    let diff = model.diffusion_branches();
    MeasureChange::product(model, MeasureLabel::Custom("jump tilt".into()), |k, i| {
        let node = NodeId::new(k, i);
        let uk = u.get(k, i);
        Ok((
            vec![1.0 / diff as f64; diff],
            tilted_jumps(model, k, i, &p_jump_dist(model, k, i), |j| exp_guarded(alpha * uk[j], node))?,
        ))
    })
}

/// Tilts the jump distribution of `base` by h(U_j) + 1 on each mark,
/// renormalizing on the no-jump outcome; the sign distribution is kept.
pub fn hat_tilt_measure(
    model: &LatticeModel,
    base: &MeasureChange,
    u: &NodeField,
    alpha: f64,
) -> Result<MeasureChange> {
    MeasureChange::product(model, MeasureLabel::QHatB, |k, i| {
        let node = NodeId::new(k, i);
        let uk = u.get(k, i);
        Ok((
            base.sign_dist(model, k, i),
            tilted_jumps(model, k, i, &base.jump_dist(model, k, i), |j| {
                hat_tilt(alpha, uk[j])
                    .map(|h| h + 1.0)
                    .map_err(|value| Error::Overflow { node, value })
            })?,
        ))
    })
}

/// Tilts every jump outcome of `base`, including no jump (`u` has m+1
/// entries per node), by h(U_j) + 1 and normalizes.
pub fn hat_tilt_measure_all(
    model: &LatticeModel,
    base: &MeasureChange,
    u_all: &NodeField,
    alpha: f64,
) -> Result<MeasureChange> {
    MeasureChange::product(model, MeasureLabel::QHatB, |k, i| {
        let node = NodeId::new(k, i);
        let jd = base.jump_dist(model, k, i);
        let mut w = Vec::with_capacity(jd.len());
        for (j, &q) in jd.iter().enumerate() {
            let h = hat_tilt(alpha, u_all.get(k, i)[j]).map_err(|value| Error::Overflow { node, value })?;
            w.push(q * (h + 1.0));
        }
        let total: f64 = w.iter().sum();
        Ok((base.sign_dist(model, k, i), w.into_iter().map(|x| x / total).collect()))
    })
}

/// H(Q|P) by the chain rule over the lattice.
pub fn relative_entropy(change: &MeasureChange, model: &LatticeModel) -> f64 {
    let mut next = vec![0.0; model.slice_len(model.steps())];
    for k in (0..model.steps()).rev() {
        let cur: Vec<f64> = (0..model.slice_len(k))
            .map(|i| {
                let q = change.probs(k, i);
                let p = model.probs(k, i);
                q.iter()
                    .zip(p)
                    .enumerate()
                    .map(|(b, (&qb, &pb))| qb * ((qb / pb).ln() + next[model.child(k, i, b)]))
                    .sum()
            })
            .collect();
        next = cur;
    }
    next[0]
}

/// α E^Q[B] - H(Q|P).
pub fn dual_objective(change: &MeasureChange, claim: &[f64], alpha: f64, model: &LatticeModel) -> f64 {
    alpha * change.expect_terminal(model, claim) - relative_entropy(change, model)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MartingaleReport {
    pub max_residual: f64,
    pub worst_node: Option<NodeId>,
}

/// max over nodes of |E^Q[ΔS | node]|.
pub fn martingale_check(change: &MeasureChange, model: &LatticeModel) -> MartingaleReport {
    let mut rep = MartingaleReport {
        max_residual: 0.0,
        worst_node: None,
    };
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let q = change.probs(k, i);
            let s = model.s(k, i);
            for c in 0..model.d() {
                let drift: f64 = q
                    .iter()
                    .enumerate()
                    .map(|(b, &qb)| qb * (model.s(k + 1, model.child(k, i, b))[c] - s[c]))
                    .sum();
                if drift.abs() > rep.max_residual {
                    rep.max_residual = drift.abs();
                    rep.worst_node = Some(NodeId::new(k, i));
                }
            }
        }
    }
    rep
}

/// max over (node, branch) of |f(b) - f_diff(b) f_jump(b)|.
pub fn factorization_defect(
    model: &LatticeModel,
    combined: &MeasureChange,
    diffusion: &MeasureChange,
    jumps: &MeasureChange,
) -> f64 {
    let mut worst = 0.0_f64;
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            for b in 0..model.branching() {
                let f = combined.factor(model, k, i, b);
                let g = diffusion.factor(model, k, i, b) * jumps.factor(model, k, i, b);
                worst = worst.max((f - g).abs());
            }
        }
    }
    worst
}

/// max over (node, mark) of |Q(jump e_j) - e^{αU_j} ζλ_j dt|.
pub fn compensator_defect(model: &LatticeModel, change: &MeasureChange, u: &NodeField, alpha: f64) -> f64 {
    let mut worst = 0.0_f64;
    for k in 0..model.steps() {
        for i in 0..model.slice_len(k) {
            let jd = change.jump_dist(model, k, i);
            for j in 0..model.m() {
                let expect = (alpha * u.get(k, i)[j]).exp() * model.jump_mass(k, i, j);
                worst = worst.max((jd[j + 1] - expect).abs());
                let zexp = (alpha * u.get(k, i)[j]).exp() * model.zeta(k, i)[j];
                worst = worst.max((change.zeta(k, i)[j] - zexp).abs() * model.marks().weight(j) * model.dt());
            }
        }
    }
    worst
}
