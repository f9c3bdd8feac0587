//! Finite scenario lattice carrying a Bernoulli Brownian driver and a marked
//! jump process.
//!
//! Each step branches into `2^d` diffusion sign patterns (ΔW_i = ±√dt,
//! equiprobable) crossed with `m + 1` jump outcomes (no jump, or one jump of
//! mark `e_j`). Under P the jump outcome is independent of the sign pattern
//! and mark `j` fires with probability ζ(node, e_j)·λ_j·dt. Branch `b` of a
//! node encodes the sign pattern in its low `d` bits (bit set = up move) and
//! the jump outcome in `b >> d` (0 = no jump).
//!
//! Asset prices follow the multiplicative update
//! `S' = S ∘ (1 + σ(φ dt + ΔW))`, so ΔS = Σ ΔŴ with Σ = diag(S)σ and
//! ΔŴ = ΔW + φ dt.
//!
//! With `recombine` set, nodes sharing (up-move counts, jump counts) are
//! merged; the lattice is then a layered DAG rather than a tree. All local
//! (one-step) computations work on both; path-wise ones need a tree.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::config::{Coefficient, IntensitySpec, ModelConfig};
use crate::error::{Error, NodeId, Result};
use crate::field::NodeField;

/// Uniform time grid on [0, T].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("`steps` must be at least 1".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config("`horizon` must be positive and finite".into()));
        }
        Ok(Self {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time of slice `k`; `time(steps)` is the horizon exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }
}

/// Finite mark space: marks `e_j` with masses `λ_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkSpace {
    values: Vec<Vec<f64>>,
    weights: Vec<f64>,
    shifts: Vec<usize>,
}

impl MarkSpace {
    pub fn new(values: Vec<Vec<f64>>, weights: Vec<f64>, shifts: Vec<usize>) -> Result<Self> {
        if values.len() != weights.len() || values.len() != shifts.len() {
            return Err(Error::Config("mark values and weights differ in length".into()));
        }
        let dim = values.first().map(Vec::len).unwrap_or(0);
        for (j, (e, &w)) in values.iter().zip(&weights).enumerate() {
            if e.is_empty() || e.iter().all(|&x| x == 0.0) {
                return Err(Error::Config(format!("mark {j}: `value` must be a nonzero vector")));
            }
            if e.len() != dim {
                return Err(Error::Config(format!("mark {j}: `value` has inconsistent length")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("mark {j}: `weight` must be finite and nonnegative")));
            }
        }
        Ok(Self {
            values,
            weights,
            shifts,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// λ(E).
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Dimension ℓ of the mark vectors.
    pub fn mark_dim(&self) -> usize {
        self.values.first().map(Vec::len).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Slice {
    pub(crate) n: usize,
    pub(crate) s: Vec<f64>,
    pub(crate) phi: Vec<f64>,
    pub(crate) sigma: Vec<f64>,
    pub(crate) zeta: Vec<f64>,
    pub(crate) jumps: Vec<u32>,
    pub(crate) ups: Vec<u32>,
    pub(crate) regime: Vec<usize>,
    pub(crate) children: Vec<u32>,
    pub(crate) prob: Vec<f64>,
}

/// Validated scenario lattice. Immutable once built.
#[derive(Debug, Clone)]
pub struct LatticeModel {
    grid: TimeGrid,
    marks: MarkSpace,
    d: usize,
    regimes: usize,
    recombined: bool,
    dw: Vec<f64>,
    pub(crate) slices: Vec<Slice>,
    c_nu: f64,
    phi_bound: f64,
    config: ModelConfig,
}

/// Terminal coordinates available to claim expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafState<'a> {
    pub s: &'a [f64],
    pub jumps: &'a [u32],
    pub mark_sum: Vec<f64>,
    pub regime: usize,
    pub ups: &'a [u32],
}

impl LatticeModel {
    /// Builds and validates the lattice described by `config`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let grid = TimeGrid::new(config.horizon, config.steps)?;
        let d = config.s0.len();
        if d == 0 {
            return Err(Error::Config("`s0` must have at least one asset".into()));
        }
        if d > 6 {
            return Err(Error::Config("at most 6 assets are supported".into()));
        }
        if config.s0.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("`s0` entries must be positive".into()));
        }
        if config.regimes == 0 {
            return Err(Error::Config("`regimes` must be at least 1".into()));
        }
        let marks = MarkSpace::new(
            config.marks.iter().map(|m| m.value.clone()).collect(),
            config.marks.iter().map(|m| m.weight).collect(),
            config.marks.iter().map(|m| m.regime_shift).collect(),
        )?;
        let m = marks.len();
        check_coefficients(config, d, m)?;
        if config.recombine && !(config.phi.is_constant() && config.sigma.is_constant()) {
            return Err(Error::Config(
                "`recombine` requires constant `phi` and `sigma`".into(),
            ));
        }

        let diff = 1usize << d;
        let branching = diff * (m + 1);
        if !config.recombine {
            let total = tree_node_count(branching as u128, config.steps);
            if total > config.node_budget as u128 {
                return Err(Error::Budget {
                    nodes: total,
                    budget: config.node_budget as u128,
                });
            }
        }

        let dt = grid.dt();
        let sq = dt.sqrt();
        let mut dw = vec![0.0; diff * d];
        for s in 0..diff {
            for i in 0..d {
                dw[s * d + i] = if (s >> i) & 1 == 1 { sq } else { -sq };
            }
        }

        let mut builder = Builder {
            config,
            d,
            m,
            dt,
            marks: &marks,
            dw: &dw,
            diff,
            branching,
            nodes: 1,
        };
        let root_regime = config.initial_regime % config.regimes;
        let mut slices = vec![builder.fresh_slice()];
        builder.push_node(
            &mut slices[0],
            &config.s0,
            &vec![0; d],
            &vec![0; m],
            root_regime,
            NodeId::new(0, 0),
        )?;

        for k in 0..config.steps {
            let mut next = builder.fresh_slice();
            let mut index: HashMap<(Vec<u32>, Vec<u32>), u32> = HashMap::new();
            let cur = &mut slices[k];
            cur.children = vec![0; cur.n * branching];
            cur.prob = vec![0.0; cur.n * branching];
            for i in 0..cur.n {
                let node = NodeId::new(k, i);
                let p_jump: Vec<f64> = (0..m)
                    .map(|j| cur.zeta[i * m + j] * marks.weight(j) * dt)
                    .collect();
                let p_none = 1.0 - p_jump.iter().sum::<f64>();
                if p_none <= 0.0 {
                    return Err(Error::StepSize {
                        node,
                        what: "no-jump branch nonpositive: 1 - sum(zeta*lambda*dt)",
                        value: p_none,
                        bound: 0.0,
                    });
                }
                let s = cur.s[i * d..(i + 1) * d].to_vec();
                let phi = cur.phi[i * d..(i + 1) * d].to_vec();
                let sigma = cur.sigma[i * d * d..(i + 1) * d * d].to_vec();
                let ups = cur.ups[i * d..(i + 1) * d].to_vec();
                let jumps = cur.jumps[i * m..(i + 1) * m].to_vec();
                let regime = cur.regime[i];
                for b in 0..branching {
                    let sign = b % diff;
                    let jump = b / diff;
                    let pj = if jump == 0 { p_none } else { p_jump[jump - 1] };
                    cur.prob[i * branching + b] = pj / diff as f64;

                    let mut s_child = vec![0.0; d];
                    for r in 0..d {
                        let mut move_r = 0.0;
                        for c in 0..d {
                            move_r += sigma[r * d + c] * (phi[c] * dt + dw[sign * d + c]);
                        }
                        let factor = 1.0 + move_r;
                        if factor <= 0.0 {
                            return Err(Error::StepSize {
                                node,
                                what: "asset gross return 1 + sigma*(phi dt + dW)",
                                value: factor,
                                bound: 0.0,
                            });
                        }
                        s_child[r] = s[r] * factor;
                    }
                    let mut ups_child = ups.clone();
                    for (c, u) in ups_child.iter_mut().enumerate() {
                        *u += ((sign >> c) & 1) as u32;
                    }
                    let mut jumps_child = jumps.clone();
                    let mut regime_child = regime;
                    if jump > 0 {
                        jumps_child[jump - 1] += 1;
                        regime_child = (regime + marks.shifts[jump - 1]) % config.regimes;
                    }
                    let child = if config.recombine {
                        let key = (ups_child.clone(), jumps_child.clone());
                        match index.get(&key) {
                            Some(&c) => c,
                            None => {
                                let c = next.n as u32;
                                builder.push_node(
                                    &mut next,
                                    &s_child,
                                    &ups_child,
                                    &jumps_child,
                                    regime_child,
                                    NodeId::new(k + 1, c as usize),
                                )?;
                                index.insert(key, c);
                                c
                            }
                        }
                    } else {
                        let c = next.n as u32;
                        builder.push_node(
                            &mut next,
                            &s_child,
                            &ups_child,
                            &jumps_child,
                            regime_child,
                            NodeId::new(k + 1, c as usize),
                        )?;
                        c
                    };
                    cur.children[i * branching + b] = child;
                }
            }
            slices.push(next);
        }

        let c_nu = slices
            .iter()
            .flat_map(|s| s.zeta.iter())
            .fold(0.0_f64, |a, &z| a.max(z));
        let phi_bound = slices
            .iter()
            .flat_map(|s| s.phi.iter())
            .fold(0.0_f64, |a, &p| a.max(p.abs()));

        let model = Self {
            grid,
            marks,
            d,
            regimes: config.regimes,
            recombined: config.recombine,
            dw,
            slices,
            c_nu,
            phi_bound,
            config: config.clone(),
        };
        crate::validate::validate_model(&model)?;
        Ok(model)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn marks(&self) -> &MarkSpace {
        &self.marks
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.grid.time(k)
    }

    /// Brownian dimension d.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of marks m.
    pub fn m(&self) -> usize {
        self.marks.len()
    }

    pub fn regimes(&self) -> usize {
        self.regimes
    }

    /// Number of diffusion sign patterns, 2^d.
    pub fn diffusion_branches(&self) -> usize {
        1 << self.d
    }

    /// Children per node, 2^d·(m+1).
    pub fn branching(&self) -> usize {
        self.diffusion_branches() * (self.m() + 1)
    }

    pub fn is_tree(&self) -> bool {
        !self.recombined
    }

    pub fn slice_len(&self, k: usize) -> usize {
        self.slices[k].n
    }

    pub fn slice_sizes(&self) -> Vec<usize> {
        self.slices.iter().map(|s| s.n).collect()
    }

    pub fn node_count(&self) -> usize {
        self.slices.iter().map(|s| s.n).sum()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.slices
            .iter()
            .enumerate()
            .flat_map(|(k, s)| (0..s.n).map(move |i| NodeId::new(k, i)))
    }

    /// Sign-pattern index of branch `b`.
    pub fn sign_of(&self, b: usize) -> usize {
        b % self.diffusion_branches()
    }

    /// Jump outcome of branch `b`: `None` for no jump, `Some(j)` for mark j.
    pub fn jump_of(&self, b: usize) -> Option<usize> {
        match b / self.diffusion_branches() {
            0 => None,
            j => Some(j - 1),
        }
    }

    /// ΔW for sign pattern `sign`.
    pub fn dw(&self, sign: usize) -> &[f64] {
        &self.dw[sign * self.d..(sign + 1) * self.d]
    }

    /// ΔŴ = ΔW + φ dt on branch `b` of node (k, i), written into `out`.
    pub fn hat_increment(&self, k: usize, i: usize, b: usize, out: &mut [f64]) {
        let dw = self.dw(self.sign_of(b));
        let phi = self.phi(k, i);
        let dt = self.dt();
        for c in 0..self.d {
            out[c] = dw[c] + phi[c] * dt;
        }
    }

    pub fn child(&self, k: usize, i: usize, b: usize) -> usize {
        self.slices[k].children[i * self.branching() + b] as usize
    }

    pub fn children(&self, k: usize, i: usize) -> impl Iterator<Item = usize> + '_ {
        let br = self.branching();
        self.slices[k].children[i * br..(i + 1) * br]
            .iter()
            .map(|&c| c as usize)
    }

    /// P-probabilities of the branches of node (k, i).
    pub fn probs(&self, k: usize, i: usize) -> &[f64] {
        let br = self.branching();
        &self.slices[k].prob[i * br..(i + 1) * br]
    }

    /// P-probabilities of every slice, node-major.
    pub fn prob_slices(&self) -> Vec<Vec<f64>> {
        self.slices.iter().map(|s| s.prob.clone()).collect()
    }

    pub fn s(&self, k: usize, i: usize) -> &[f64] {
        &self.slices[k].s[i * self.d..(i + 1) * self.d]
    }

    pub fn phi(&self, k: usize, i: usize) -> &[f64] {
        &self.slices[k].phi[i * self.d..(i + 1) * self.d]
    }

    /// σ at node (k, i), row-major d×d.
    pub fn sigma(&self, k: usize, i: usize) -> &[f64] {
        let dd = self.d * self.d;
        &self.slices[k].sigma[i * dd..(i + 1) * dd]
    }

    pub fn zeta(&self, k: usize, i: usize) -> &[f64] {
        let m = self.m();
        &self.slices[k].zeta[i * m..(i + 1) * m]
    }

    pub fn jumps(&self, k: usize, i: usize) -> &[u32] {
        let m = self.m();
        &self.slices[k].jumps[i * m..(i + 1) * m]
    }

    pub fn ups(&self, k: usize, i: usize) -> &[u32] {
        &self.slices[k].ups[i * self.d..(i + 1) * self.d]
    }

    pub fn regime(&self, k: usize, i: usize) -> usize {
        self.slices[k].regime[i]
    }

    /// ν-mass ζ(node, e_j)·λ_j·dt of mark j over the step leaving (k, i).
    pub fn jump_mass(&self, k: usize, i: usize, j: usize) -> f64 {
        self.zeta(k, i)[j] * self.marks.weight(j) * self.dt()
    }

    /// Realized bound c_ν = max ζ.
    pub fn c_nu(&self) -> f64 {
        self.c_nu
    }

    /// sup |φ| over nodes and components.
    pub fn phi_bound(&self) -> f64 {
        self.phi_bound
    }

    /// sup over nodes of |φ|² (Euclidean).
    pub fn phi_sq_bound(&self) -> f64 {
        let d = self.d;
        self.slices
            .iter()
            .flat_map(|s| s.phi.chunks(d))
            .map(|p| p.iter().map(|x| x * x).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn leaf_state(&self, i: usize) -> LeafState<'_> {
        let k = self.steps();
        let jumps = self.jumps(k, i);
        let mut mark_sum = vec![0.0; self.marks.mark_dim()];
        for (j, &count) in jumps.iter().enumerate() {
            for (acc, &e) in mark_sum.iter_mut().zip(self.marks.value(j)) {
                *acc += count as f64 * e;
            }
        }
        LeafState {
            s: self.s(k, i),
            jumps,
            mark_sum,
            regime: self.regime(k, i),
            ups: self.ups(k, i),
        }
    }

    /// Evaluates `claim` at every terminal node.
    pub fn terminal_values(&self, claim: impl Fn(&LeafState<'_>) -> f64) -> Vec<f64> {
        (0..self.slice_len(self.steps()))
            .map(|i| claim(&self.leaf_state(i)))
            .collect()
    }

    /// Branch sequence leading to node (k, i) on a tree lattice.
    pub fn path_of(&self, node: NodeId) -> Option<Vec<usize>> {
        if !self.is_tree() {
            return None;
        }
        let br = self.branching();
        let mut idx = node.index;
        let mut path = vec![0; node.slice];
        for step in (0..node.slice).rev() {
            path[step] = idx % br;
            idx /= br;
        }
        Some(path)
    }

    /// Human-readable location: branch path on trees, slice/index otherwise.
    pub fn describe(&self, node: NodeId) -> String {
        match self.path_of(node) {
            Some(p) if !p.is_empty() => format!(
                "{node} (path {})",
                p.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("-")
            ),
            Some(_) => format!("{node} (root)"),
            None => node.to_string(),
        }
    }

    /// Per-node field of zeros with `dim` entries.
    pub fn zeros(&self, dim: usize) -> NodeField {
        NodeField::zeros(dim, &self.slice_sizes())
    }

    /// θ = Σᵀϑ with Σ = diag(S)σ.
    pub fn theta_of_shares(&self, shares: &[f64], k: usize, i: usize) -> Vec<f64> {
        let d = self.d;
        let s = self.s(k, i);
        let sigma = self.sigma(k, i);
        (0..d)
            .map(|c| (0..d).map(|r| sigma[r * d + c] * s[r] * shares[r]).sum())
            .collect()
    }

    /// ϑ = (Σᵀ)⁻¹θ.
    pub fn shares_of_theta(&self, theta: &[f64], k: usize, i: usize) -> Result<Vec<f64>> {
        let d = self.d;
        let s = self.s(k, i);
        let sigma = self.sigma(k, i);
        let sigma_t = DMatrix::from_fn(d, d, |r, c| sigma[c * d + r] * s[c]);
        let rhs = DVector::from_column_slice(theta);
        sigma_t
            .lu()
            .solve(&rhs)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .map(|x| x.iter().copied().collect())
            .ok_or(Error::Singular(NodeId::new(k, i)))
    }
}

fn tree_node_count(branching: u128, steps: usize) -> u128 {
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=steps {
        total = total.saturating_add(level);
        level = level.saturating_mul(branching);
    }
    total
}

fn check_coefficients(config: &ModelConfig, d: usize, m: usize) -> Result<()> {
    for phi in config.phi.values() {
        if phi.len() != d {
            return Err(Error::Config(format!("`phi` must have {d} components")));
        }
    }
    for sigma in config.sigma.values() {
        if sigma.len() != d || sigma.iter().any(|r| r.len() != d) {
            return Err(Error::Config(format!("`sigma` must be {d}x{d}")));
        }
    }
    if let Coefficient::PerRegime(v) = &config.phi {
        if v.len() != config.regimes {
            return Err(Error::Config("`phi.per_regime` needs one entry per regime".into()));
        }
    }
    if let Coefficient::PerRegime(v) = &config.sigma {
        if v.len() != config.regimes {
            return Err(Error::Config("`sigma.per_regime` needs one entry per regime".into()));
        }
    }
    match (&config.intensity, m) {
        (None, 0) => {}
        (None, _) => return Err(Error::Config("`intensity` is required when marks are present".into())),
        (Some(IntensitySpec::Constant(z)), _) if z.len() != m => {
            return Err(Error::Config(format!("`intensity.constant` must have {m} entries")))
        }
        (Some(IntensitySpec::PerRegime(zs)), _)
            if zs.len() != config.regimes || zs.iter().any(|z| z.len() != m) =>
        {
            return Err(Error::Config(
                "`intensity.per_regime` needs one entry per regime, each with one value per mark".into(),
            ))
        }
        (Some(IntensitySpec::SelfExciting { base, excitation, cap }), _)
            if base.len() != m || excitation.len() != m || !(*cap >= 0.0) =>
        {
            return Err(Error::Config(
                "`intensity.self_exciting` needs `base` and `excitation` per mark and `cap` >= 0".into(),
            ))
        }
        _ => {}
    }
    Ok(())
}

struct Builder<'a> {
    config: &'a ModelConfig,
    d: usize,
    m: usize,
    dt: f64,
    marks: &'a MarkSpace,
    #[allow(dead_code)]
    dw: &'a [f64],
    #[allow(dead_code)]
    diff: usize,
    #[allow(dead_code)]
    branching: usize,
    nodes: u64,
}

impl Builder<'_> {
    fn fresh_slice(&self) -> Slice {
        Slice {
            n: 0,
            s: Vec::new(),
            phi: Vec::new(),
            sigma: Vec::new(),
            zeta: Vec::new(),
            jumps: Vec::new(),
            ups: Vec::new(),
            regime: Vec::new(),
            children: Vec::new(),
            prob: Vec::new(),
        }
    }

    fn push_node(
        &mut self,
        slice: &mut Slice,
        s: &[f64],
        ups: &[u32],
        jumps: &[u32],
        regime: usize,
        node: NodeId,
    ) -> Result<()> {
        self.nodes += 1;
        if self.nodes > self.config.node_budget {
            return Err(Error::Budget {
                nodes: self.nodes as u128,
                budget: self.config.node_budget as u128,
            });
        }
        let d = self.d;
        let sq = self.dt.sqrt();
        let phi = self.config.phi.at_regime(regime);
        let sigma = self.config.sigma.at_regime(regime);
        for &p in phi {
            if p.abs() * sq >= 1.0 {
                return Err(Error::StepSize {
                    node,
                    what: "|phi|*sqrt(dt)",
                    value: p.abs() * sq,
                    bound: 1.0,
                });
            }
        }
        for row in sigma {
            for &x in row {
                if x.abs() * sq >= 1.0 {
                    return Err(Error::StepSize {
                        node,
                        what: "|sigma|*sqrt(dt)",
                        value: x.abs() * sq,
                        bound: 1.0,
                    });
                }
            }
        }
        let mat = DMatrix::from_fn(d, d, |r, c| sigma[r][c]);
        let scale = sigma.iter().flatten().fold(0.0_f64, |a, &x| a.max(x.abs()));
        let det = mat.determinant();
        if !(det.abs() > 1e-14 * scale.powi(d as i32).max(f64::MIN_POSITIVE)) {
            return Err(Error::Singular(node));
        }

        let total_jumps: u32 = jumps.iter().sum();
        let zeta: Vec<f64> = match &self.config.intensity {
            None => Vec::new(),
            Some(IntensitySpec::Constant(z)) => z.clone(),
            Some(IntensitySpec::PerRegime(zs)) => zs[regime].clone(),
            Some(IntensitySpec::SelfExciting {
                base,
                excitation,
                cap,
            }) => base
                .iter()
                .zip(excitation)
                .map(|(b, e)| (b + e * total_jumps as f64).min(*cap))
                .collect(),
        };
        for (j, &z) in zeta.iter().enumerate() {
            if !(z >= 0.0 && z.is_finite()) {
                return Err(Error::Config(format!(
                    "intensity for mark {j} at node {node} is negative or not finite"
                )));
            }
        }
        let mass: f64 = zeta
            .iter()
            .enumerate()
            .map(|(j, z)| z * self.marks.weight(j) * self.dt)
            .sum();
        if mass >= 1.0 {
            return Err(Error::StepSize {
                node,
                what: "no-jump branch nonpositive: sum(zeta*lambda*dt)",
                value: mass,
                bound: 1.0,
            });
        }

        slice.s.extend_from_slice(s);
        slice.phi.extend_from_slice(phi);
        slice.sigma.extend(sigma.iter().flatten().copied());
        slice.zeta.extend_from_slice(&zeta);
        slice.ups.extend_from_slice(ups);
        slice.jumps.extend_from_slice(jumps);
        debug_assert_eq!(jumps.len(), self.m);
        slice.regime.push(regime);
        slice.n += 1;
        Ok(())
    }
}

/// Strategy integrands θ(node) against Ŵ, one d-vector per node.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyField {
    theta: NodeField,
}

impl StrategyField {
    pub fn new(theta: NodeField) -> Self {
        Self { theta }
    }

    pub fn zeros(model: &LatticeModel) -> Self {
        Self::new(model.zeros(model.d()))
    }

    /// Same θ vector at every node.
    pub fn constant(model: &LatticeModel, theta: &[f64]) -> Self {
        let mut field = model.zeros(model.d());
        for node in model.nodes() {
            field.get_mut(node.slice, node.index).copy_from_slice(theta);
        }
        Self::new(field)
    }

    pub fn theta(&self) -> &NodeField {
        &self.theta
    }

    pub fn at(&self, k: usize, i: usize) -> &[f64] {
        self.theta.get(k, i)
    }

    /// Share holdings ϑ = (Σᵀ)⁻¹θ at every non-terminal node.
    pub fn shares(&self, model: &LatticeModel) -> Result<NodeField> {
        let mut out = model.zeros(model.d());
        for k in 0..model.steps() {
            for i in 0..model.slice_len(k) {
                let v = model.shares_of_theta(self.at(k, i), k, i)?;
                out.get_mut(k, i).copy_from_slice(&v);
            }
        }
        Ok(out)
    }

    /// Pointwise sum with another strategy.
    pub fn plus(&self, other: &StrategyField) -> StrategyField {
        StrategyField::new(self.theta.zip_with(&other.theta, |a, b| a + b))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::MarkConfig;

    pub(crate) fn config(d_phi: f64, sigma: f64, steps: usize, marks: &[(f64, f64)]) -> ModelConfig {
        ModelConfig {
            horizon: 1.0,
            steps,
            s0: vec![1.0],
            phi: Coefficient::Constant(vec![d_phi]),
            sigma: Coefficient::Constant(vec![vec![sigma]]),
            marks: marks
                .iter()
                .map(|&(v, w)| MarkConfig {
                    value: vec![v],
                    weight: w,
                    regime_shift: 1,
                })
                .collect(),
            intensity: if marks.is_empty() {
                None
            } else {
                Some(IntensitySpec::Constant(vec![1.0; marks.len()]))
            },
            regimes: 1,
            initial_regime: 0,
            recombine: false,
            node_budget: crate::config::DEFAULT_NODE_BUDGET,
        }
    }

    #[test]
    fn one_step_pure_diffusion_leaves() {
        let model = LatticeModel::build(&config(0.0, 0.2, 1, &[])).unwrap();
        assert_eq!(model.slice_len(1), 2);
        let mut prices: Vec<f64> = (0..2).map(|i| model.s(1, i)[0]).collect();
        prices.sort_by(f64::total_cmp);
        assert!((prices[0] - 0.8).abs() < 1e-15);
        assert!((prices[1] - 1.2).abs() < 1e-15);
        assert_eq!(model.probs(0, 0), &[0.5, 0.5]);
    }

    #[test]
    fn one_step_with_one_mark_has_four_leaves() {
        // ζλ = 0.1
        let model = LatticeModel::build(&config(0.0, 0.2, 1, &[(1.0, 0.1)])).unwrap();
        assert_eq!(model.slice_len(1), 4);
        let p = model.probs(0, 0);
        // branch = jump * 2 + sign
        assert!((p[0] - 0.45).abs() < 1e-15);
        assert!((p[1] - 0.45).abs() < 1e-15);
        assert!((p[2] - 0.05).abs() < 1e-15);
        assert!((p[3] - 0.05).abs() < 1e-15);
        assert_eq!(model.jump_of(2), Some(0));
        assert_eq!(model.jump_of(1), None);
        // jump branches carry the same price moves as no-jump branches
        assert_eq!(model.s(1, 1), model.s(1, 3));
    }

    #[test]
    fn time_grid_hits_horizon_exactly() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.time(3), 1.0);
        assert!((g.dt() * 3.0 - 1.0).abs() < 1e-15);
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn rejects_step_size_violations() {
        let err = LatticeModel::build(&config(0.0, 1.5, 1, &[])).unwrap_err();
        assert!(matches!(err, Error::StepSize { .. }), "{err}");
        let err = LatticeModel::build(&config(2.0, 0.2, 1, &[])).unwrap_err();
        assert!(err.to_string().contains("phi"), "{err}");
        // ζλdt = 1.2
        let err = LatticeModel::build(&config(0.0, 0.2, 1, &[(1.0, 1.2)])).unwrap_err();
        assert!(err.to_string().contains("zeta"), "{err}");
    }

    #[test]
    fn rejects_singular_sigma() {
        let mut cfg = config(0.0, 0.2, 1, &[]);
        cfg.s0 = vec![1.0, 1.0];
        cfg.phi = Coefficient::Constant(vec![0.0, 0.0]);
        cfg.sigma = Coefficient::Constant(vec![vec![0.2, 0.1], vec![0.4, 0.2]]);
        assert!(matches!(LatticeModel::build(&cfg), Err(Error::Singular(_))));
    }

    #[test]
    fn node_budget_is_enforced() {
        let mut cfg = config(0.0, 0.2, 12, &[(1.0, 0.1)]);
        cfg.node_budget = 1000;
        assert!(matches!(LatticeModel::build(&cfg), Err(Error::Budget { .. })));
        cfg.recombine = true;
        assert!(LatticeModel::build(&cfg).is_ok());
    }

    #[test]
    fn recombining_lattice_merges_commuting_paths() {
        let mut cfg = config(0.3, 0.2, 4, &[(1.0, 0.2)]);
        cfg.recombine = true;
        let model = LatticeModel::build(&cfg).unwrap();
        // (up count 0..=k) x (jump count 0..=k)
        for k in 0..=4 {
            assert_eq!(model.slice_len(k), (k + 1) * (k + 1));
        }
        assert!(!model.is_tree());
        assert!(model.path_of(NodeId::new(2, 1)).is_none());
    }

    #[test]
    fn path_of_decodes_tree_index() {
        let model = LatticeModel::build(&config(0.0, 0.2, 2, &[(1.0, 0.1)])).unwrap();
        let node = NodeId::new(2, 3 * 4 + 2);
        assert_eq!(model.path_of(node).unwrap(), vec![3, 2]);
        assert_eq!(model.child(0, 0, 3), 3);
        assert_eq!(model.child(1, 3, 2), 14);
    }

    #[test]
    fn shares_theta_conversion() {
        let mut cfg = config(0.0, 0.3, 1, &[]);
        cfg.s0 = vec![2.0];
        let model = LatticeModel::build(&cfg).unwrap();
        assert_eq!(model.theta_of_shares(&[0.0], 0, 0), vec![0.0]);
        assert!((model.theta_of_shares(&[5.0], 0, 0)[0] - 3.0).abs() < 1e-15);
        assert!((model.shares_of_theta(&[3.0], 0, 0).unwrap()[0] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn self_exciting_intensity_grows_with_jumps() {
        let mut cfg = config(0.0, 0.2, 2, &[(1.0, 0.1)]);
        cfg.intensity = Some(IntensitySpec::SelfExciting {
            base: vec![1.0],
            excitation: vec![0.5],
            cap: 1.4,
        });
        let model = LatticeModel::build(&cfg).unwrap();
        for i in 0..model.slice_len(1) {
            let expect = if model.jumps(1, i)[0] == 1 { 1.4 } else { 1.0 };
            assert_eq!(model.zeta(1, i)[0], expect);
        }
        assert_eq!(model.c_nu(), 1.4);
    }
}
