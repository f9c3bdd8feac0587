//! Conditional stability estimate for two BSDE solutions on one lattice.
//!
//! For solutions (Y, Z, U) of (f, B) and (Y', Z', U') of (f', B'), at every
//! node τ:
//!
//! ```text
//! lhs(τ) = E_τ[ sup_{s>=τ} |δY_s|² + Σ_{s>=τ} |δZ_s|² dt + Σ_{s>=τ} Σ_j |δU_{s,j}|² ν-mass ]
//! rhs(τ) = E_τ[ |δB|² + Σ_{s>=τ} |δf_s|² dt ],  δf = f(Y', Z', U') - f'(Y', Z', U')
//! ```
//!
//! The estimate says lhs <= c rhs with c depending only on the horizon and
//! the Lipschitz constant of f; the ratio field is returned.

use serde::Serialize;

use crate::bsde::{solve_bsde_under, BsdeSolution, SolverOptions};
use crate::error::{Error, NodeId, Result};
use crate::field::NodeField;
use crate::generator::{GenInput, GeneratorSpec};
use crate::lattice::LatticeModel;
use crate::measure::MeasureChange;
use crate::paths::{conditional_running_sum, conditional_sup, conditional_terminal, expect_at_stopping, StoppingRule};

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub lhs: NodeField,
    pub rhs: NodeField,
    /// lhs/rhs; 0 where both vanish, infinite where only rhs does.
    pub ratio: NodeField,
    pub max_ratio: f64,
}

impl StabilityReport {
    /// E[lhs(τ)] / E[rhs(τ)] for a stopping rule τ.
    pub fn stopped_ratio(&self, model: &LatticeModel, measure: Option<&MeasureChange>, rule: &StoppingRule) -> Result<f64> {
        let l = expect_at_stopping(model, measure, rule, &self.lhs)?;
        let r = expect_at_stopping(model, measure, rule, &self.rhs)?;
        Ok(ratio(l, r))
    }
}

fn ratio(l: f64, r: f64) -> f64 {
    if l == 0.0 && r == 0.0 {
        0.0
    } else {
        l / r
    }
}

fn same_shape(a: &NodeField, b: &NodeField) -> bool {
    a.dim() == b.dim()
        && a.slice_count() == b.slice_count()
        && (0..a.slice_count()).all(|k| a.slice_len(k) == b.slice_len(k))
}

pub fn stability_gap(
    model: &LatticeModel,
    measure: Option<&MeasureChange>,
    sol: &BsdeSolution,
    gen: &GeneratorSpec,
    sol_p: &BsdeSolution,
    gen_p: &GeneratorSpec,
) -> Result<StabilityReport> {
    let sizes = model.slice_sizes();
    for s in [sol, sol_p] {
        let ok = s.y.slice_count() == sizes.len()
            && (0..sizes.len()).all(|k| s.y.slice_len(k) == sizes[k])
            && s.z.dim() == model.d()
            && s.u.dim() == model.m();
        if !ok {
            return Err(Error::LatticeMismatch);
        }
    }
    if !same_shape(&sol.y, &sol_p.y) || !same_shape(&sol.z, &sol_p.z) || !same_shape(&sol.u, &sol_p.u) {
        return Err(Error::LatticeMismatch);
    }
    let n = model.steps();
    let dt = model.dt();
    let diff = model.diffusion_branches();
    let dy2 = sol.y.zip_with(&sol_p.y, |a, b| (a - b) * (a - b));
    let mut zu = model.zeros(1);
    let mut df = model.zeros(1);
    for k in 0..n {
        for i in 0..model.slice_len(k) {
            let q = match measure {
                Some(m) => m.probs(k, i),
                None => model.probs(k, i),
            };
            let dz: f64 = sol.z.get(k, i).iter().zip(sol_p.z.get(k, i)).map(|(a, b)| (a - b).powi(2)).sum();
            let mut du = 0.0;
            let mut rates = vec![0.0; model.m()];
            for j in 0..model.m() {
                let mass: f64 = q[(j + 1) * diff..(j + 2) * diff].iter().sum();
                rates[j] = mass / dt;
                du += (sol.u.get(k, i)[j] - sol_p.u.get(k, i)[j]).powi(2) * mass;
            }
            zu.set(k, i, dz * dt + du);
            let inp = GenInput {
                node: NodeId::new(k, i),
                t: model.time(k),
                y: sol_p.y.at(k, i),
                z: sol_p.z.get(k, i),
                u: sol_p.u.get(k, i),
                phi: model.phi(k, i),
                rates: &rates,
            };
            let d = gen.eval(&inp)? - gen_p.eval(&inp)?;
            df.set(k, i, d * d * dt);
        }
    }
    let sup = conditional_sup(model, measure, &dy2);
    let zu = conditional_running_sum(model, measure, &zu);
    let db2: Vec<f64> = sol.terminal().iter().zip(sol_p.terminal()).map(|(a, b)| (a - b) * (a - b)).collect();
    let eb = conditional_terminal(model, measure, &db2);
    let ef = conditional_running_sum(model, measure, &df);
    let lhs = sup.zip_with(&zu, |a, b| a + b);
    let rhs = eb.zip_with(&ef, |a, b| a + b);
    let ratio_f = lhs.zip_with(&rhs, ratio);
    let max_ratio = ratio_f.slices().iter().flatten().copied().fold(0.0, f64::max);
    Ok(StabilityReport {
        lhs,
        rhs,
        ratio: ratio_f,
        max_ratio,
    })
}

/// Special case against the zero solution: lhs built from (Y, Z, U) alone,
/// rhs from |B|² and |f(t, 0, 0, 0)|².
pub fn a_priori_ratio(model: &LatticeModel, measure: Option<&MeasureChange>, sol: &BsdeSolution, gen: &GeneratorSpec) -> Result<StabilityReport> {
    let zero = BsdeSolution {
        y: model.zeros(1),
        z: model.zeros(model.d()),
        u: model.zeros(model.m()),
        residual: model.zeros(1),
        iterations: model.slice_sizes().iter().map(|&s| vec![0; s]).collect(),
    };
    stability_gap(model, measure, sol, gen, &zero, &GeneratorSpec::Zero)
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationStudy {
    pub deltas: Vec<f64>,
    pub max_ratio: Vec<f64>,
    /// max over nodes with nonzero rhs and pairs of deltas of |r_a/r_b - 1|.
    pub max_relative_spread: f64,
}

/// Solves (gen, B) and (gen, B + δ h) for each δ and compares ratio fields.
pub fn perturbation_study(
    model: &LatticeModel,
    gen: &GeneratorSpec,
    terminal: &[f64],
    direction: &[f64],
    deltas: &[f64],
    opts: &SolverOptions,
) -> Result<PerturbationStudy> {
    if direction.len() != terminal.len() {
        return Err(Error::LatticeMismatch);
    }
    let base = solve_bsde_under(model, None, gen, terminal, None, opts)?;
    let mut fields = Vec::with_capacity(deltas.len());
    let mut max_ratio = Vec::with_capacity(deltas.len());
    for &d in deltas {
        let b: Vec<f64> = terminal.iter().zip(direction).map(|(x, h)| x + d * h).collect();
        let sol = solve_bsde_under(model, None, gen, &b, None, opts)?;
        let rep = stability_gap(model, None, &sol, gen, &base, gen)?;
        max_ratio.push(rep.max_ratio);
        fields.push(rep);
    }
    let mut spread = 0.0_f64;
    for a in 0..fields.len() {
        for b in a + 1..fields.len() {
            for k in 0..=model.steps() {
                for i in 0..model.slice_len(k) {
                    if fields[a].rhs.at(k, i) > 0.0 && fields[b].rhs.at(k, i) > 0.0 {
                        let (ra, rb) = (fields[a].ratio.at(k, i), fields[b].ratio.at(k, i));
                        spread = spread.max((ra / rb - 1.0).abs());
                    }
                }
            }
        }
    }
    Ok(PerturbationStudy {
        deltas: deltas.to_vec(),
        max_ratio,
        max_relative_spread: spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::solve_bsde;
    use crate::lattice::tests::config;

    #[test]
    fn identical_data_gives_zero_gaps() {
        let model = LatticeModel::build(&config(0.4, 0.2, 3, &[(1.0, 0.2)])).unwrap();
        let b = model.terminal_values(|l| l.jumps[0] as f64 * 0.1);
        let g = GeneratorSpec::Entropic { alpha: 1.0 };
        let s = solve_bsde(&model, &g, &b, &SolverOptions::default()).unwrap();
        let r = stability_gap(&model, None, &s, &g, &s, &g).unwrap();
        assert_eq!(r.lhs.max_abs(), 0.0);
        assert_eq!(r.rhs.max_abs(), 0.0);
        assert_eq!(r.max_ratio, 0.0);
    }

    #[test]
    fn constant_shift_with_zero_driver_has_ratio_one() {
        let model = LatticeModel::build(&config(0.4, 0.2, 3, &[(1.0, 0.2)])).unwrap();
        let b = model.terminal_values(|l| l.s[0]);
        let eps = 1e-2;
        let bp: Vec<f64> = b.iter().map(|x| x + eps).collect();
        let g = GeneratorSpec::Zero;
        let o = SolverOptions::default();
        let s = solve_bsde(&model, &g, &bp, &o).unwrap();
        let sp = solve_bsde(&model, &g, &b, &o).unwrap();
        let r = stability_gap(&model, None, &s, &g, &sp, &g).unwrap();
        assert!(r.lhs.map(|v| v - eps * eps).max_abs() < 1e-15);
        assert!(r.rhs.map(|v| v - eps * eps).max_abs() < 1e-15);
        assert!(r.ratio.map(|v| v - 1.0).max_abs() < 1e-10);
        let tau = r.stopped_ratio(&model, None, &StoppingRule::FirstJump).unwrap();
        assert!((tau - 1.0).abs() < 1e-10);
    }

    #[test]
    fn linear_regime_ratio_is_stable() {
        let model = LatticeModel::build(&config(0.4, 0.2, 3, &[(1.0, 0.2)])).unwrap();
        let b = model.terminal_values(|l| 0.5 * (l.jumps[0] >= 1) as u8 as f64);
        let h = model.terminal_values(|l| (l.jumps[0] >= 1) as u8 as f64 + 0.1 * l.s[0]);
        let g = GeneratorSpec::Entropic { alpha: 1.0 };
        let st = perturbation_study(&model, &g, &b, &h, &[1e-2, 1e-3], &SolverOptions::default()).unwrap();
        assert!(st.max_relative_spread < 0.2, "{st:?}");
    }

    #[test]
    fn a_priori_estimate_is_finite() {
        let model = LatticeModel::build(&config(0.4, 0.2, 3, &[(1.0, 0.2)])).unwrap();
        let b = model.terminal_values(|l| 0.5 * (l.jumps[0] >= 1) as u8 as f64);
        let g = GeneratorSpec::Entropic { alpha: 1.0 };
        let s = solve_bsde(&model, &g, &b, &SolverOptions::default()).unwrap();
        let r = a_priori_ratio(&model, None, &s, &g).unwrap();
        assert!(r.max_ratio.is_finite() && r.max_ratio > 0.0);
    }

    #[test]
    fn mismatched_lattices_are_rejected() {
        let m2 = LatticeModel::build(&config(0.4, 0.2, 2, &[(1.0, 0.2)])).unwrap();
        let m3 = LatticeModel::build(&config(0.4, 0.2, 3, &[(1.0, 0.2)])).unwrap();
        let g = GeneratorSpec::Zero;
        let o = SolverOptions::default();
        let s2 = solve_bsde(&m2, &g, &vec![0.0; m2.slice_len(2)], &o).unwrap();
        let s3 = solve_bsde(&m3, &g, &vec![0.0; m3.slice_len(3)], &o).unwrap();
        assert!(matches!(stability_gap(&m3, None, &s3, &g, &s2, &g), Err(Error::LatticeMismatch)));
    }
}
