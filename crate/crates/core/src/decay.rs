//! Learnable distance-decay priors.
//!
//! Each family maps a tile distance `d ≥ 0` to a prior weight `f(d|θ) ∈ (0, 1]`
//! with `f(0|θ) = 1`, non-increasing in `d`. The scale `θ` is kept positive by
//! storing an unconstrained raw value `ρ` and using `θ = softplus(ρ)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DecayError {
    #[error("pruning threshold tau must lie in (0, 1), got {0}")]
    TauOutOfRange(f64),
    #[error("radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("unknown decay family {0:?} (expected exp, gauss or cauchy)")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecayFamily {
    /// `exp(-θ d)`
    Exponential,
    /// `exp(-d² / 2θ²)`
    Gaussian,
    /// `1 / (1 + (d/θ)²)`
    Cauchy,
}

impl DecayFamily {
    pub const ALL: [DecayFamily; 3] = [DecayFamily::Exponential, DecayFamily::Gaussian, DecayFamily::Cauchy];

    pub fn key(self) -> &'static str {
        match self {
            DecayFamily::Exponential => "exp",
            DecayFamily::Gaussian => "gauss",
            DecayFamily::Cauchy => "cauchy",
        }
    }

    /// θ for which `f⁻¹(τ|θ) = radius`.
    pub fn theta_for_radius(self, radius: f64, tau: f64) -> Result<f64, DecayError> {
        check_tau(tau)?;
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(DecayError::BadRadius(radius));
        }
        Ok(match self {
            DecayFamily::Exponential => -tau.ln() / radius,
            DecayFamily::Gaussian => radius / (-2.0 * tau.ln()).sqrt(),
            DecayFamily::Cauchy => radius / (1.0 / tau - 1.0).sqrt(),
        })
    }
}

impl fmt::Display for DecayFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for DecayFamily {
    type Err = DecayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exp" => Ok(DecayFamily::Exponential),
            "gauss" => Ok(DecayFamily::Gaussian),
            "cauchy" => Ok(DecayFamily::Cauchy),
            other => Err(DecayError::UnknownFamily(other.to_owned())),
        }
    }
}

/// `ln(1 + e^x)`, computed without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`: `ln(e^y − 1)`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_tau(tau: f64) -> Result<(), DecayError> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(DecayError::TauOutOfRange(tau))
    }
}

/// Partial derivatives of `f(d|θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayGrad {
    pub df_dtheta: f64,
    pub dtheta_drho: f64,
}

impl DecayGrad {
    pub fn df_drho(&self) -> f64 {
        self.df_dtheta * self.dtheta_drho
    }
}

/// A decay family with its raw (pre-softplus) parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPrior {
    pub family: DecayFamily,
    pub raw: f64,
}

impl DecayPrior {
    pub fn new(family: DecayFamily, raw: f64) -> Self {
        Self { family, raw }
    }

    pub fn from_theta(family: DecayFamily, theta: f64) -> Self {
        Self::new(family, softplus_inverse(theta))
    }

    /// Prior whose pruning radius at `tau` is `radius`.
    pub fn from_radius(family: DecayFamily, radius: f64, tau: f64) -> Result<Self, DecayError> {
        Ok(Self::from_theta(family, family.theta_for_radius(radius, tau)?))
    }

    pub fn theta(&self) -> f64 {
        softplus(self.raw)
    }

    /// `f(d|θ)`.
    pub fn eval(&self, d: f64) -> f64 {
        let theta = self.theta();
        match self.family {
            DecayFamily::Exponential => (-theta * d).exp(),
            DecayFamily::Gaussian => (-d * d / (2.0 * theta * theta)).exp(),
            DecayFamily::Cauchy => {
                let u = d / theta;
                1.0 / (1.0 + u * u)
            }
        }
    }

    /// `ln f(d|θ)`, evaluated directly so it never underflows.
    pub fn log_eval(&self, d: f64) -> f64 {
        let theta = self.theta();
        match self.family {
            DecayFamily::Exponential => -theta * d,
            DecayFamily::Gaussian => -d * d / (2.0 * theta * theta),
            DecayFamily::Cauchy => {
                let u = d / theta;
                -(u * u).ln_1p()
            }
        }
    }

    /// `∂ ln f(d|θ) / ∂θ`, the quantity backpropagated through attention scores.
    pub fn dlog_dtheta(&self, d: f64) -> f64 {
        let theta = self.theta();
        match self.family {
            DecayFamily::Exponential => -d,
            DecayFamily::Gaussian => d * d / (theta * theta * theta),
            DecayFamily::Cauchy => {
                let u = d / theta;
                2.0 * d * d / (theta * theta * theta) / (1.0 + u * u)
            }
        }
    }

    /// The unique `d ≥ 0` with `f(d|θ) = τ`.
    pub fn inverse(&self, tau: f64) -> Result<f64, DecayError> {
        check_tau(tau)?;
        let theta = self.theta();
        Ok(match self.family {
            DecayFamily::Exponential => -tau.ln() / theta,
            DecayFamily::Gaussian => theta * (-2.0 * tau.ln()).sqrt(),
            DecayFamily::Cauchy => theta * (1.0 / tau - 1.0).sqrt(),
        })
    }

    pub fn grad(&self, d: f64) -> DecayGrad {
        let theta = self.theta();
        let df_dtheta = match self.family {
            DecayFamily::Exponential => -d * (-theta * d).exp(),
            DecayFamily::Gaussian => self.eval(d) * d * d / (theta * theta * theta),
            DecayFamily::Cauchy => {
                let u = d / theta;
                let denom = 1.0 + u * u;
                (2.0 * d * d / (theta * theta * theta)) / (denom * denom)
            }
        };
        DecayGrad {
            df_dtheta,
            dtheta_drho: sigmoid(self.raw),
        }
    }
}

/// Radii `2 · 8^{h/(H-1)}` for `h = 0..H`: a geometric ladder from 2 to 16 tiles.
/// A single head starts at radius 2.
pub fn initial_radii(heads: usize) -> Vec<f64> {
    if heads <= 1 {
        return vec![2.0; heads];
    }
    (0..heads)
        .map(|h| 2.0 * 8f64.powf(h as f64 / (heads - 1) as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn with_theta(family: DecayFamily, theta: f64) -> DecayPrior {
        DecayPrior::from_theta(family, theta)
    }

    #[test]
    fn eval_examples() {
        for fam in DecayFamily::ALL {
            assert_eq!(with_theta(fam, 3.7).eval(0.0), 1.0);
        }
        let g = with_theta(DecayFamily::Gaussian, 2.0).eval(2.0);
        assert!((g - 0.60653066).abs() < 1e-8);
        let c = with_theta(DecayFamily::Cauchy, 1.0).eval(1.0);
        assert!((c - 0.5).abs() < 1e-12);
    }

    #[test]
    fn inverse_examples() {
        let e = with_theta(DecayFamily::Exponential, 1.0)
            .inverse((-3f64).exp())
            .unwrap();
        assert!((e - 3.0).abs() < 1e-12);
        let g = with_theta(DecayFamily::Gaussian, 1.0).inverse((-2f64).exp()).unwrap();
        assert!((g - 2.0).abs() < 1e-12);
        let c = with_theta(DecayFamily::Cauchy, 1.0).inverse(0.5).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_rejects_tau_outside_unit_interval() {
        let p = with_theta(DecayFamily::Gaussian, 1.0);
        for tau in [0.0, 1.0, -0.5, 2.0, f64::NAN] {
            assert!(p.inverse(tau).is_err(), "tau {tau}");
        }
    }

    #[test]
    fn grad_examples() {
        for fam in DecayFamily::ALL {
            assert_eq!(with_theta(fam, 1.3).grad(0.0).df_dtheta, 0.0);
        }
        let c = with_theta(DecayFamily::Cauchy, 1.0).grad(1.0);
        assert!((c.df_dtheta - 0.5).abs() < 1e-12);
        let g = with_theta(DecayFamily::Gaussian, 1.0).grad(1.0);
        assert!((g.df_dtheta - 0.60653066).abs() < 1e-8);
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-6, 0.1, 1.0, 5.0, 40.0, 700.0] {
            let back = softplus(softplus_inverse(y));
            assert!((back - y).abs() <= 1e-9 * y.max(1.0), "{y} -> {back}");
        }
        assert!(softplus(-30.0) > 0.0);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn inverse_round_trip_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for fam in DecayFamily::ALL {
            for _ in 0..100 {
                let p = with_theta(fam, rng.gen_range(0.1..50.0));
                for tau in [1e-4, 1e-3, 1e-2, 0.1, 0.5, 0.9] {
                    let back = p.eval(p.inverse(tau).unwrap());
                    assert!((back - tau).abs() <= 1e-9, "{fam} θ={} τ={tau}", p.theta());
                }
            }
        }
    }

    #[test]
    fn analytic_grad_matches_central_difference_in_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..1000 {
            let fam = DecayFamily::ALL[rng.gen_range(0..3)];
            let raw = rng.gen_range(-2.0..4.0);
            let d = rng.gen_range(0.0..10.0);
            let p = DecayPrior::new(fam, raw);
            let fd = (DecayPrior::new(fam, raw + h).eval(d) - DecayPrior::new(fam, raw - h).eval(d)) / (2.0 * h);
            let analytic = p.grad(d).df_drho();
            let rel = (analytic - fd).abs() / analytic.abs().max(1.0);
            assert!(rel <= 1e-6, "{fam} raw={raw} d={d}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn log_eval_is_bounded_below_inside_radius() {
        for fam in DecayFamily::ALL {
            for theta in [0.05, 0.5, 3.0, 40.0] {
                let p = with_theta(fam, theta);
                for tau in [1e-6, 1e-4, 1e-2] {
                    let r = p.inverse(tau).unwrap();
                    for k in 0..=100 {
                        let d = r * k as f64 / 100.0;
                        assert!(p.log_eval(d).is_finite());
                        assert!(p.log_eval(d) >= tau.ln() - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn dlog_matches_grad_over_value() {
        for fam in DecayFamily::ALL {
            let p = with_theta(fam, 1.7);
            for d in [0.0, 0.5, 2.0, 6.0] {
                let g = p.grad(d).df_dtheta / p.eval(d);
                assert!((g - p.dlog_dtheta(d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn initial_ladder_spans_two_to_sixteen() {
        let r = initial_radii(4);
        assert!((r[0] - 2.0).abs() < 1e-12 && (r[3] - 16.0).abs() < 1e-12);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        let p = DecayPrior::from_radius(DecayFamily::Gaussian, r[2], 1e-3).unwrap();
        assert!((p.inverse(1e-3).unwrap() - r[2]).abs() < 1e-9);
    }

    #[test]
    fn family_keys_parse() {
        for fam in DecayFamily::ALL {
            assert_eq!(fam.key().parse::<DecayFamily>().unwrap(), fam);
        }
        assert!("linear".parse::<DecayFamily>().is_err());
    }

    proptest! {
        #[test]
        fn monotone_non_increasing(fam in 0usize..3, raw in -3.0f64..5.0, a in 0.0f64..50.0, b in 0.0f64..50.0) {
            let p = DecayPrior::new(DecayFamily::ALL[fam], raw);
            let (d1, d2) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p.eval(d1) >= p.eval(d2));
            prop_assert!(p.eval(d2) >= 0.0);
            prop_assert!(p.theta() > 0.0);
        }
    }
}
