//! Truncation boundary b(t) and clamp κ(t, y).
//!
//! With growth constants K_1, K_2 of the jump-free driver part and terminal
//! bound K_3,
//!
//! ```text
//! b(t) = K_3 + K_1 (T - t)                                      if K_2 = 0
//! b(t) = K_3 e^{K_2 (T - t)} + (K_1 / K_2)(e^{K_2 (T - t)} - 1)  otherwise
//! κ(t, y) = min(max(y, -b(t)), b(t))
//! ```

use serde::Serialize;

use crate::error::{Error, Result};
use crate::generator::GeneratorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncationProfile {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub horizon: f64,
}

impl TruncationProfile {
    pub fn new(k1: f64, k2: f64, k3: f64, horizon: f64) -> Result<Self> {
        for (name, v) in [("K1", k1), ("K2", k2), ("K3", k3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        Ok(Self { k1, k2, k3, horizon })
    }

    /// Profile for the exponential-utility driver with liability bound
    /// `claim_sup`: K_1 = sup|φ|²/(2α), K_2 = 0, K_3 = claim_sup + T K_1.
    pub fn exponential_utility(phi_sq: f64, alpha: f64, claim_sup: f64, horizon: f64) -> Result<Self> {
        let k1 = phi_sq / (2.0 * alpha);
        Self::new(k1, 0.0, claim_sup + horizon * k1, horizon)
    }

    pub fn boundary(&self, t: f64) -> f64 {
        boundary(t, self, self.horizon)
    }

    pub fn truncate(&self, t: f64, y: f64) -> f64 {
        let b = self.boundary(t);
        y.clamp(-b, b)
    }
}

pub fn boundary(t: f64, profile: &TruncationProfile, horizon: f64) -> f64 {
    let rem = horizon - t;
    if profile.k2 == 0.0 {
        profile.k3 + profile.k1 * rem
    } else {
        let e = (profile.k2 * rem).exp();
        profile.k3 * e + profile.k1 / profile.k2 * (e - 1.0)
    }
}

pub fn truncate(t: f64, y: f64, profile: &TruncationProfile) -> f64 {
    profile.truncate(t, y)
}

/// Wraps `g` so that it is evaluated at clamped arguments.
///
/// The zero driver is returned unchanged. Drivers without growth constants
/// are rejected.
pub fn truncate_generator(g: &GeneratorSpec, profile: TruncationProfile) -> Result<GeneratorSpec> {
    if g.growth_constants(0.0).is_none() {
        return Err(Error::MissingGrowthConstants);
    }
    Ok(match g {
        GeneratorSpec::Zero => GeneratorSpec::Zero,
        GeneratorSpec::Truncated { inner, .. } => GeneratorSpec::Truncated {
            inner: inner.clone(),
            profile,
        },
        other => GeneratorSpec::Truncated {
            inner: Box::new(other.clone()),
            profile,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::NodeId;
    use crate::generator::{entropic_jump_integrand, GenInput};

    #[test]
    fn boundary_examples() {
        let p = TruncationProfile::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(p.boundary(0.3), 1.0);
        let p = TruncationProfile::new(1.0, 0.0, 2.0, 1.0).unwrap();
        assert_eq!(p.boundary(0.25), 2.75);
        let p = TruncationProfile::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.boundary(0.0) - (2.0 * e - 1.0)).abs() < 1e-15);
        assert!((p.boundary(0.0) - 4.436564).abs() < 1e-6);
        assert_eq!(p.boundary(1.0), 1.0);
    }

    #[test]
    fn boundary_is_nonincreasing() {
        let p = TruncationProfile::new(0.3, 0.7, 0.5, 2.0).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..=20 {
            let b = p.boundary(0.1 * i as f64);
            assert!(b <= last);
            last = b;
        }
    }

    #[test]
    fn truncate_examples() {
        let p = TruncationProfile::new(0.0, 0.0, 2.0, 1.0).unwrap();
        assert_eq!(p.truncate(0.0, 5.0), 2.0);
        assert_eq!(p.truncate(0.0, -3.0), -2.0);
        assert_eq!(p.truncate(0.0, 1.0), 1.0);
        assert_eq!(p.truncate(0.0, p.truncate(0.0, 5.0)), 2.0);
    }

    #[test]
    fn zero_generator_stays_zero() {
        let p = TruncationProfile::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(truncate_generator(&GeneratorSpec::Zero, p).unwrap().is_zero());
    }

    #[test]
    fn custom_generator_is_rejected() {
        let p = TruncationProfile::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let g = GeneratorSpec::Custom(std::sync::Arc::new(|_| 1.0));
        assert!(matches!(truncate_generator(&g, p), Err(Error::MissingGrowthConstants)));
    }

    fn input<'a>(y: f64, u: &'a [f64], rates: &'a [f64]) -> GenInput<'a> {
        GenInput {
            node: NodeId::new(0, 0),
            t: 0.0,
            y,
            z: &[0.0],
            u,
            phi: &[0.4],
            rates,
        }
    }

    #[test]
    fn truncated_entropic_inside_band_is_unchanged() {
        let p = TruncationProfile::new(0.08, 0.0, 1.0, 1.0).unwrap();
        let g = GeneratorSpec::Entropic { alpha: 1.0 };
        let t = truncate_generator(&g, p).unwrap();
        let (u, r) = ([0.3], [0.2]);
        let a = g.eval(&input(0.2, &u, &r)).unwrap();
        let b = t.eval(&input(0.2, &u, &r)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_entropic_outside_band_uses_clamped_arguments() {
        let p = TruncationProfile::new(0.08, 0.0, 1.0, 1.0).unwrap();
        let b = p.boundary(0.0);
        let g = GeneratorSpec::Entropic { alpha: 1.0 };
        let t = truncate_generator(&g, p).unwrap();
        let (u, r) = ([-0.5], [0.2]);
        let y = b + 1.0;
        let got = t.eval(&input(y, &u, &r)).unwrap();
        // f̂ is y-free; κ(y) = b, κ(y + u) = b, so the jump argument is 0.
        let ky = b;
        let kyu = (y - 0.5).clamp(-b, b);
        let expect = -0.16 / 2.0 + entropic_jump_integrand(1.0, kyu - ky).unwrap() * 0.2;
        assert!((got - expect).abs() < 1e-15);
        assert!((got + 0.08).abs() < 1e-16);
    }
}
