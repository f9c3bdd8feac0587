//! Stopping rules and conditional path functionals.

use serde::Serialize;

use crate::bsde::Stopped;
use crate::error::{Error, Result};
use crate::field::NodeField;
use crate::lattice::LatticeModel;
use crate::measure::MeasureChange;

/// A stopping rule τ on the lattice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum StoppingRule {
    /// τ = T.
    Horizon,
    /// τ = t_k.
    Deterministic(usize),
    /// First slice with at least one jump, or T.
    FirstJump,
    /// First slice where S[asset] is at or beyond `level` (above or below), or T.
    Barrier { asset: usize, level: f64, above: bool },
    /// τ given per leaf as a slice index. Trees only; checked for adaptedness.
    PerLeaf(Vec<usize>),
}

impl StoppingRule {
    /// stop[k][i]: is τ = t_k on the paths through (k, i), given that the
    /// node was reached before τ. The terminal slice always stops.
    pub fn stop_flags(&self, model: &LatticeModel) -> Result<Vec<Vec<bool>>> {
        let n = model.steps();
        let mut flags: Vec<Vec<bool>> = (0..=n).map(|k| vec![k == n; model.slice_len(k)]).collect();
        match self {
            StoppingRule::Horizon => {}
            StoppingRule::Deterministic(s) => {
                if *s > n {
                    return Err(Error::NotAStoppingRule(format!("slice {s} is beyond the horizon ({n} steps)")));
                }
                flags[*s].iter_mut().for_each(|f| *f = true);
            }
            StoppingRule::FirstJump => {
                for (k, fk) in flags.iter_mut().enumerate() {
                    for (i, f) in fk.iter_mut().enumerate() {
                        *f |= model.jumps(k, i).iter().any(|&c| c > 0);
                    }
                }
            }
            StoppingRule::Barrier { asset, level, above } => {
                if *asset >= model.d() {
                    return Err(Error::NotAStoppingRule(format!("asset {asset} does not exist")));
                }
                for (k, fk) in flags.iter_mut().enumerate() {
                    for (i, f) in fk.iter_mut().enumerate() {
                        let s = model.s(k, i)[*asset];
                        *f |= if *above { s >= *level } else { s <= *level };
                    }
                }
            }
            StoppingRule::PerLeaf(tau) => {
                if !model.is_tree() {
                    return Err(Error::NotATree);
                }
                if tau.len() != model.slice_len(n) {
                    return Err(Error::LatticeMismatch);
                }
                if let Some(&t) = tau.iter().find(|&&t| t > n) {
                    return Err(Error::NotAStoppingRule(format!("leaf stopping slice {t} is beyond the horizon")));
                }
                // {τ <= k} must be decided at slice k: constant over each subtree
                let br = model.branching();
                for k in 0..n {
                    let width = br.pow((n - k) as u32);
                    for i in 0..model.slice_len(k) {
                        let sub = &tau[i * width..(i + 1) * width];
                        let here = sub.iter().filter(|&&t| t <= k).count();
                        if here != 0 && here != sub.len() {
                            return Err(Error::NotAStoppingRule(format!(
                                "event {{tau <= {k}}} is not decided at node {}",
                                model.describe(crate::error::NodeId::new(k, i))
                            )));
                        }
                        flags[k][i] = here == sub.len() && sub.iter().any(|&t| t == k);
                    }
                }
            }
        }
        Ok(flags)
    }

    /// alive[k][i]: node reached on [0, τ] along some path.
    pub fn alive(&self, model: &LatticeModel) -> Result<Vec<Vec<bool>>> {
        let flags = self.stop_flags(model)?;
        Ok(alive_from_flags(model, &flags))
    }

    /// Stopped-value field: `values` at stopping nodes that are alive.
    pub fn stopped_values(&self, model: &LatticeModel, values: &NodeField) -> Result<Stopped> {
        let flags = self.stop_flags(model)?;
        let alive = alive_from_flags(model, &flags);
        Ok((0..=model.steps())
            .map(|k| {
                (0..model.slice_len(k))
                    .map(|i| (flags[k][i] && alive[k][i]).then(|| values.at(k, i)))
                    .collect()
            })
            .collect())
    }
}

fn alive_from_flags(model: &LatticeModel, flags: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = model.steps();
    let mut alive: Vec<Vec<bool>> = (0..=n).map(|k| vec![false; model.slice_len(k)]).collect();
    alive[0][0] = true;
    for k in 0..n {
        for i in 0..model.slice_len(k) {
            if alive[k][i] && !flags[k][i] {
                for c in model.children(k, i).collect::<Vec<_>>() {
                    alive[k + 1][c] = true;
                }
            }
        }
    }
    alive
}

fn probs_of<'a>(model: &'a LatticeModel, measure: Option<&'a MeasureChange>, k: usize, i: usize) -> &'a [f64] {
    match measure {
        Some(m) => m.probs(k, i),
        None => model.probs(k, i),
    }
}

/// A(k, i) = E[Σ_{s >= k, s < T} running(s) | node], under P or `measure`.
pub fn conditional_running_sum(model: &LatticeModel, measure: Option<&MeasureChange>, running: &NodeField) -> NodeField {
    let n = model.steps();
    let mut out = model.zeros(1);
    for k in (0..n).rev() {
        for i in 0..model.slice_len(k) {
            let q = probs_of(model, measure, k, i);
            let next: f64 = q
                .iter()
                .enumerate()
                .map(|(b, p)| p * out.at(k + 1, model.child(k, i, b)))
                .sum();
            out.set(k, i, running.at(k, i) + next);
        }
    }
    out
}

/// E[terminal | node] at every node.
pub fn conditional_terminal(model: &LatticeModel, measure: Option<&MeasureChange>, terminal: &[f64]) -> NodeField {
    let n = model.steps();
    let mut out = model.zeros(1);
    out.slice_mut(n).copy_from_slice(terminal);
    for k in (0..n).rev() {
        for i in 0..model.slice_len(k) {
            let q = probs_of(model, measure, k, i);
            let v: f64 = q
                .iter()
                .enumerate()
                .map(|(b, p)| p * out.at(k + 1, model.child(k, i, b)))
                .sum();
            out.set(k, i, v);
        }
    }
    out
}

/// E[sup_{s >= k} x_s | node] at every node. The conditional law of the
/// running maximum is carried as a sorted list of atoms, so the result is
/// exact on recombining lattices as well.
pub fn conditional_sup(model: &LatticeModel, measure: Option<&MeasureChange>, x: &NodeField) -> NodeField {
    let n = model.steps();
    let mut out = model.zeros(1);
    let mut next: Vec<Vec<(f64, f64)>> = (0..model.slice_len(n)).map(|i| vec![(x.at(n, i), 1.0)]).collect();
    for i in 0..model.slice_len(n) {
        out.set(n, i, x.at(n, i));
    }
    for k in (0..n).rev() {
        let mut cur = Vec::with_capacity(model.slice_len(k));
        for i in 0..model.slice_len(k) {
            let here = x.at(k, i);
            let q = probs_of(model, measure, k, i);
            let mut atoms: Vec<(f64, f64)> = Vec::new();
            for (b, &p) in q.iter().enumerate() {
                for &(v, w) in &next[model.child(k, i, b)] {
                    atoms.push((v.max(here), p * w));
                }
            }
            atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
            for (v, w) in atoms {
                match merged.last_mut() {
                    Some(last) if last.0 == v => last.1 += w,
                    _ => merged.push((v, w)),
                }
            }
            out.set(k, i, merged.iter().map(|(v, w)| v * w).sum());
            cur.push(merged);
        }
        next = cur;
    }
    out
}

/// E[value at τ] from the root, with `values` read at the stopping nodes.
pub fn expect_at_stopping(
    model: &LatticeModel,
    measure: Option<&MeasureChange>,
    rule: &StoppingRule,
    values: &NodeField,
) -> Result<f64> {
    let flags = rule.stop_flags(model)?;
    let n = model.steps();
    let mut mass: Vec<Vec<f64>> = (0..=n).map(|k| vec![0.0; model.slice_len(k)]).collect();
    mass[0][0] = 1.0;
    let mut total = 0.0;
    for k in 0..=n {
        for i in 0..model.slice_len(k) {
            let w = mass[k][i];
            if w == 0.0 {
                continue;
            }
            if flags[k][i] {
                total += w * values.at(k, i);
                continue;
            }
            let q = probs_of(model, measure, k, i);
            for (b, p) in q.iter().enumerate() {
                mass[k + 1][model.child(k, i, b)] += w * p;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::tests::config;

    #[test]
    fn first_jump_flags_and_alive_set() {
        let model = LatticeModel::build(&config(0.4, 0.2, 2, &[(1.0, 0.2)])).unwrap();
        let rule = StoppingRule::FirstJump;
        let alive = rule.alive(&model).unwrap();
        // children of a jump node at slice 1 are never reached before τ
        for i in 0..model.slice_len(1) {
            let jumped = model.jumps(1, i)[0] > 0;
            for c in model.children(1, i) {
                assert_eq!(alive[2][c], !jumped);
            }
        }
    }

    #[test]
    fn per_leaf_rule_must_be_adapted() {
        let model = LatticeModel::build(&config(0.4, 0.2, 2, &[])).unwrap();
        let mut tau = vec![2; 4];
        assert!(StoppingRule::PerLeaf(tau.clone()).stop_flags(&model).is_ok());
        tau[0] = 1;
        tau[1] = 1;
        assert!(StoppingRule::PerLeaf(tau.clone()).stop_flags(&model).is_ok());
        tau[1] = 2;
        let err = StoppingRule::PerLeaf(tau).stop_flags(&model).unwrap_err();
        assert!(matches!(err, Error::NotAStoppingRule(_)));
    }

    #[test]
    fn conditional_sup_of_constant_and_monotone_fields() {
        let model = LatticeModel::build(&config(0.0, 0.2, 3, &[(1.0, 0.2)])).unwrap();
        let c = model.zeros(1).map(|_| 2.5);
        assert!(conditional_sup(&model, None, &c).max_abs_diff(&c) < 1e-15);
        // x_k = k: the sup is the terminal value
        let mut x = model.zeros(1);
        for k in 0..=3 {
            for i in 0..model.slice_len(k) {
                x.set(k, i, k as f64);
            }
        }
        assert!((conditional_sup(&model, None, &x).at(0, 0) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn conditional_sup_matches_path_enumeration() {
        let model = LatticeModel::build(&config(0.3, 0.2, 3, &[(1.0, 0.3)])).unwrap();
        let mut x = model.zeros(1);
        for k in 0..=3 {
            for i in 0..model.slice_len(k) {
                x.set(k, i, ((k * 7 + i * 13) % 5) as f64);
            }
        }
        let br = model.branching();
        let mut expect = 0.0;
        for leaf in 0..model.slice_len(3) {
            let path = model.path_of(crate::error::NodeId::new(3, leaf)).unwrap();
            let (mut idx, mut p, mut sup) = (0, 1.0, x.at(0, 0));
            for (k, &b) in path.iter().enumerate() {
                p *= model.probs(k, idx)[b];
                idx = idx * br + b;
                sup = f64::max(sup, x.at(k + 1, idx));
            }
            expect += p * sup;
        }
        assert!((conditional_sup(&model, None, &x).at(0, 0) - expect).abs() < 1e-14);
    }

    #[test]
    fn expectation_at_horizon_is_plain_expectation() {
        let model = LatticeModel::build(&config(0.3, 0.2, 2, &[(1.0, 0.3)])).unwrap();
        let b = model.terminal_values(|l| l.s[0]);
        let mut f = model.zeros(1);
        f.slice_mut(2).copy_from_slice(&b);
        let direct = conditional_terminal(&model, None, &b).at(0, 0);
        let via = expect_at_stopping(&model, None, &StoppingRule::Horizon, &f).unwrap();
        assert!((direct - via).abs() < 1e-15);
    }
}
