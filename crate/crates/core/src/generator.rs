//! BSDE drivers f(t, y, z, u).
//!
//! Jump-integrand arguments `u[j]` are paired with per-unit-time jump rates
//! `rates[j]` of the measure the equation is written under, so
//! `Σ_j g(u_j) rates[j]` is the lattice form of `∫ g(u(e)) ζ(e) λ(de)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, NodeId, Result};
use crate::truncation::TruncationProfile;

/// Arguments passed to a driver at one node.
#[derive(Debug, Clone, Copy)]
pub struct GenInput<'a> {
    pub node: NodeId,
    pub t: f64,
    pub y: f64,
    pub z: &'a [f64],
    pub u: &'a [f64],
    /// Market price of risk at the node.
    pub phi: &'a [f64],
    /// Jump rates (probability per unit time) of each mark.
    pub rates: &'a [f64],
}

pub type CustomDriver = Arc<dyn Fn(&GenInput<'_>) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum GeneratorSpec {
    Zero,
    /// `c + a·y + b·z + Σ_j c_j u_j rate_j`. Empty vectors mean zeros.
    Affine {
        constant: f64,
        y: f64,
        z: Vec<f64>,
        u: Vec<f64>,
    },
    /// Exponential-utility driver under the minimal martingale measure:
    /// `-|φ|²/(2α) + Σ_j g_α(u_j) rate_j`.
    Entropic { alpha: f64 },
    /// Same problem written under P: `-z·φ - |φ|²/(2α) + Σ_j g_α(u_j) rate_j`.
    EntropicP { alpha: f64 },
    /// Indifference driver under the minimal entropy measure:
    /// `Σ_j g_α(u_j) rate_j`.
    Indifference { alpha: f64 },
    /// `inner` evaluated at clamped arguments (see [`crate::truncation`]).
    Truncated {
        inner: Box<GeneratorSpec>,
        profile: TruncationProfile,
    },
    Custom(CustomDriver),
}

impl fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorSpec::Zero => write!(f, "Zero"),
            GeneratorSpec::Affine { constant, y, z, u } => f
                .debug_struct("Affine")
                .field("constant", constant)
                .field("y", y)
                .field("z", z)
                .field("u", u)
                .finish(),
            GeneratorSpec::Entropic { alpha } => write!(f, "Entropic {{ alpha: {alpha} }}"),
            GeneratorSpec::EntropicP { alpha } => write!(f, "EntropicP {{ alpha: {alpha} }}"),
            GeneratorSpec::Indifference { alpha } => {
                write!(f, "Indifference {{ alpha: {alpha} }}")
            }
            GeneratorSpec::Truncated { inner, profile } => f
                .debug_struct("Truncated")
                .field("inner", inner)
                .field("profile", profile)
                .finish(),
            GeneratorSpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// g_α(u) = (e^{αu} - 1)/α - u.
///
/// Fails when |αu| > 700.
pub fn entropic_jump_integrand(alpha: f64, u: f64) -> std::result::Result<f64, f64> {
    let x = alpha * u;
    if x.abs() > 700.0 || !x.is_finite() {
        return Err(x.abs());
    }
    if u == 0.0 {
        return Ok(0.0);
    }
    Ok(x.exp_m1() / alpha - u)
}

/// h_α(u) = g_α(u)/u, with h(0) = 0. Always > -1.
pub fn hat_tilt(alpha: f64, u: f64) -> std::result::Result<f64, f64> {
    let x = alpha * u;
    if x.abs() > 700.0 || !x.is_finite() {
        return Err(x.abs());
    }
    if x.abs() < 1e-6 {
        return Ok(x / 2.0 + x * x / 6.0);
    }
    Ok(x.exp_m1() / x - 1.0)
}

fn g_sum(alpha: f64, u: &[f64], rates: &[f64], node: NodeId) -> Result<f64> {
    let mut acc = 0.0;
    for (&uj, &r) in u.iter().zip(rates) {
        let g = entropic_jump_integrand(alpha, uj).map_err(|value| Error::Overflow { node, value })?;
        acc += g * r;
    }
    Ok(acc)
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GeneratorSpec {
    pub fn eval(&self, inp: &GenInput<'_>) -> Result<f64> {
        match self {
            GeneratorSpec::Zero => Ok(0.0),
            GeneratorSpec::Affine { constant, y, z, u } => {
                let mut v = constant + y * inp.y + dot(z, inp.z);
                for ((&c, &uj), &r) in u.iter().zip(inp.u).zip(inp.rates) {
                    v += c * uj * r;
                }
                Ok(v)
            }
            GeneratorSpec::Entropic { alpha } => {
                Ok(-norm_sq(inp.phi) / (2.0 * alpha) + g_sum(*alpha, inp.u, inp.rates, inp.node)?)
            }
            GeneratorSpec::EntropicP { alpha } => Ok(-dot(inp.z, inp.phi)
                - norm_sq(inp.phi) / (2.0 * alpha)
                + g_sum(*alpha, inp.u, inp.rates, inp.node)?),
            GeneratorSpec::Indifference { alpha } => g_sum(*alpha, inp.u, inp.rates, inp.node),
            GeneratorSpec::Truncated { inner, profile } => {
                let ky = profile.truncate(inp.t, inp.y);
                let u: Vec<f64> = inp
                    .u
                    .iter()
                    .map(|&uj| profile.truncate(inp.t, inp.y + uj) - ky)
                    .collect();
                inner.eval(&GenInput {
                    y: ky,
                    u: &u,
                    ..*inp
                })
            }
            GeneratorSpec::Custom(f) => Ok(f(inp)),
        }
    }

    /// Linear-growth constants (K_1, K_2) of the jump-free part:
    /// `|f̂(t, y, 0, 0)| <= K_1 + K_2 |y|`, given the bound `phi_sq` on |φ|².
    ///
    /// `None` when the driver does not have the split form needed by the
    /// truncation construction.
    pub fn growth_constants(&self, phi_sq: f64) -> Option<(f64, f64)> {
        match self {
            GeneratorSpec::Zero | GeneratorSpec::Indifference { .. } => Some((0.0, 0.0)),
            GeneratorSpec::Affine { constant, y, z, u } => {
                if z.iter().chain(u).all(|&c| c == 0.0) {
                    Some((constant.abs(), y.abs()))
                } else {
                    None
                }
            }
            GeneratorSpec::Entropic { alpha } | GeneratorSpec::EntropicP { alpha } => {
                Some((phi_sq / (2.0 * alpha), 0.0))
            }
            GeneratorSpec::Truncated { inner, .. } => inner.growth_constants(phi_sq),
            GeneratorSpec::Custom(_) => None,
        }
    }

    /// Lipschitz constant in y used to check that Picard contracts
    /// (`K dt < 1`). `None` when no such bound is declared.
    pub fn y_lipschitz(&self, max_rate_sum: f64) -> Option<f64> {
        match self {
            GeneratorSpec::Zero
            | GeneratorSpec::Entropic { .. }
            | GeneratorSpec::EntropicP { .. }
            | GeneratorSpec::Indifference { .. } => Some(0.0),
            GeneratorSpec::Affine { y, .. } => Some(y.abs()),
            GeneratorSpec::Truncated { inner, profile } => {
                let base = inner.y_lipschitz(max_rate_sum)?;
                match inner.jump_alpha() {
                    Some(alpha) => {
                        let b = profile.boundary(0.0);
                        // |g'(v)| = |e^{αv} - 1| <= e^{2αb} - 1 for |v| <= 2b, and
                        // κ(y+u) - κ(y) is 1-Lipschitz in y
                        Some(base + (2.0 * alpha * b).min(700.0).exp_m1() * max_rate_sum)
                    }
                    None => Some(base),
                }
            }
            GeneratorSpec::Custom(_) => None,
        }
    }

    /// Risk aversion of the entropic jump integrand, if the driver has one.
    pub fn jump_alpha(&self) -> Option<f64> {
        match self {
            GeneratorSpec::Entropic { alpha }
            | GeneratorSpec::EntropicP { alpha }
            | GeneratorSpec::Indifference { alpha } => Some(*alpha),
            GeneratorSpec::Truncated { inner, .. } => inner.jump_alpha(),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, GeneratorSpec::Zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn input<'a>(y: f64, z: &'a [f64], u: &'a [f64], phi: &'a [f64], rates: &'a [f64]) -> GenInput<'a> {
        GenInput {
            node: NodeId::new(0, 0),
            t: 0.0,
            y,
            z,
            u,
            phi,
            rates,
        }
    }

    #[test]
    fn jump_integrand_examples() {
        assert_eq!(entropic_jump_integrand(1.0, 0.0), Ok(0.0));
        let v = entropic_jump_integrand(1.0, 1.0).unwrap();
        assert!((v - (std::f64::consts::E - 2.0)).abs() < 1e-15);
        assert!((v - 0.718282).abs() < 1e-6);
        let v = entropic_jump_integrand(2.0, -0.5).unwrap();
        assert!((v - ((-1.0f64).exp() - 1.0) / 2.0 - 0.5).abs() < 1e-15);
        assert!((v - 0.183940).abs() < 1e-6);
        assert!(entropic_jump_integrand(1.0, 701.0).is_err());
    }

    #[test]
    fn entropic_driver_at_zero_jumps_is_constant() {
        let g = GeneratorSpec::Entropic { alpha: 2.0 };
        let v = g.eval(&input(5.0, &[1.0], &[0.0], &[0.4], &[0.2])).unwrap();
        assert!((v + 0.04).abs() < 1e-15);
    }

    #[test]
    fn p_form_adds_the_z_term() {
        let g = GeneratorSpec::EntropicP { alpha: 2.0 };
        let v = g.eval(&input(0.0, &[0.5], &[], &[0.4], &[])).unwrap();
        assert!((v - (-0.2 - 0.04)).abs() < 1e-15);
    }

    #[test]
    fn hat_tilt_matches_definition_and_series() {
        for &u in &[-2.0, -0.3, 0.7, 1.5] {
            let h = hat_tilt(1.3, u).unwrap();
            let direct = entropic_jump_integrand(1.3, u).unwrap() / u;
            assert!((h - direct).abs() < 1e-14);
            assert!(h > -1.0);
        }
        assert_eq!(hat_tilt(1.0, 0.0), Ok(0.0));
        let tiny = 1e-8;
        assert!((hat_tilt(1.0, tiny).unwrap() - tiny / 2.0).abs() < 1e-16);
    }

    #[test]
    fn growth_constants_by_kind() {
        assert_eq!(GeneratorSpec::Zero.growth_constants(1.0), Some((0.0, 0.0)));
        let e = GeneratorSpec::Entropic { alpha: 2.0 };
        assert_eq!(e.growth_constants(0.16), Some((0.04, 0.0)));
        let custom = GeneratorSpec::Custom(Arc::new(|_| 0.0));
        assert_eq!(custom.growth_constants(0.0), None);
        let a = GeneratorSpec::Affine {
            constant: -1.0,
            y: 0.5,
            z: vec![],
            u: vec![],
        };
        assert_eq!(a.growth_constants(0.0), Some((1.0, 0.5)));
    }

    proptest! {
        #[test]
        fn jump_integrand_is_nonnegative_and_bounded(alpha in 0.01f64..5.0, u in -20.0f64..20.0) {
            let g = entropic_jump_integrand(alpha, u).unwrap();
            prop_assert!(g >= 0.0);
            if u <= 0.0 {
                prop_assert!(g <= u.abs() + 1e-12);
            }
            prop_assert!(g >= -u.abs());
        }

        #[test]
        fn jump_integrand_is_midpoint_convex(alpha in 0.01f64..3.0, a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let mid = entropic_jump_integrand(alpha, 0.5 * (a + b)).unwrap();
            let avg = 0.5 * (entropic_jump_integrand(alpha, a).unwrap() + entropic_jump_integrand(alpha, b).unwrap());
            prop_assert!(mid <= avg + 1e-9 * (1.0 + avg.abs()));
        }
    }
}
