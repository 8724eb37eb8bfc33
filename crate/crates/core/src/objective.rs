//! Classification loss and the entropy-based head diversity loss.
//!
//! The per-head decay scales `θ_h` are treated as samples of a density that is
//! estimated with a Gaussian KDE of bandwidth `σ`:
//!
//! ```text
//! p̂(x) = 1/(Hσ) Σ_h φ((x − θ_h)/σ)
//! ```
//!
//! Its entropy is estimated by Monte Carlo with reparametrized samples
//! `x = θ_h + σ ε`, so the estimate is differentiable in every `θ_h`. The
//! diversity loss is the negative entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("KDE bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("at least one head value is required")]
    NoHeads,
    #[error("Monte Carlo sample count must be at least 1")]
    NoSamples,
    #[error("cross-entropy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    /// KDE bandwidth in θ units.
    pub bandwidth: f64,
    /// Monte Carlo noise draws per head.
    pub samples: usize,
    /// Weight of the diversity term in the total loss.
    pub alpha: f64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            bandwidth: 0.5,
            samples: 64,
            alpha: 0.1,
        }
    }
}

fn phi(u: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * u * u).exp()
}

fn check(thetas: &[f64], bandwidth: f64) -> Result<(), ObjectiveError> {
    if thetas.is_empty() {
        return Err(ObjectiveError::NoHeads);
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(ObjectiveError::Bandwidth(bandwidth));
    }
    Ok(())
}

/// Gaussian KDE over `thetas` evaluated at `x`.
pub fn kde_pdf(thetas: &[f64], bandwidth: f64, x: f64) -> Result<f64, ObjectiveError> {
    check(thetas, bandwidth)?;
    Ok(kde(thetas, bandwidth, x))
}

fn kde(thetas: &[f64], bandwidth: f64, x: f64) -> f64 {
    let sum: f64 = thetas.iter().map(|t| phi((x - t) / bandwidth)).sum();
    sum / (thetas.len() as f64 * bandwidth)
}

/// Standard normal draws shared by every head (common random numbers).
pub fn entropy_noise(samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Monte Carlo entropy of the KDE.
///
/// The mixture component is integrated out rather than sampled: every head
/// is paired with the same `samples` noise draws `ε_m`, giving `H·M`
/// equally weighted points `θ_h + σ ε_m` from the KDE.
pub fn entropy_mc(thetas: &[f64], bandwidth: f64, samples: usize, seed: u64) -> Result<f64, ObjectiveError> {
    check(thetas, bandwidth)?;
    if samples == 0 {
        return Err(ObjectiveError::NoSamples);
    }
    let noise = entropy_noise(samples, seed);
    let mut total = 0.0;
    for &t in thetas {
        for &e in &noise {
            total += kde(thetas, bandwidth, t + bandwidth * e).ln();
        }
    }
    Ok(-total / (thetas.len() * samples) as f64)
}

/// `-entropy_mc` and its exact gradient with respect to each `θ_h`, through
/// both the sample locations and the kernel centres.
pub fn diversity_loss(thetas: &[f64], config: &DiversityConfig, seed: u64) -> Result<(f64, Vec<f64>), ObjectiveError> {
    check(thetas, config.bandwidth)?;
    if config.samples == 0 {
        return Err(ObjectiveError::NoSamples);
    }
    let bw = config.bandwidth;
    let h_count = thetas.len();
    let noise = entropy_noise(config.samples, seed);
    let norm = 1.0 / (h_count * config.samples) as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; h_count];
    // φ'(u) = -u φ(u)
    let mut dphi = vec![0.0; h_count];
    for (h, &t) in thetas.iter().enumerate() {
        for &e in &noise {
            let x = t + bw * e;
            let mut dens = 0.0;
            let mut dsum = 0.0;
            for (k, &tk) in thetas.iter().enumerate() {
                let u = (x - tk) / bw;
                let p = phi(u);
                dens += p;
                dphi[k] = -u * p;
                dsum += dphi[k];
            }
            // d ln p̂(x)/dθ_l = (δ_hl Σ_k φ'(u_k) − φ'(u_l)) / (bw Σ_k φ(u_k))
            let scale = norm / (bw * dens);
            loss += norm * (dens / (h_count as f64 * bw)).ln();
            for (l, g) in grads.iter_mut().enumerate() {
                let mut v = -dphi[l];
                if l == h {
                    v += dsum;
                }
                *g += scale * v;
            }
        }
    }
    Ok((loss, grads))
}

/// Softmax cross-entropy and its gradient over the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let c = logits.len();
    if c < 2 {
        return Err(ObjectiveError::TooFewClasses(c));
    }
    if label >= c {
        return Err(ObjectiveError::LabelOutOfRange { label, classes: c });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, l)| (l - log_z).exp() - if k == label { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// `ce + alpha · div`.
pub fn total_loss(ce: f64, div: f64, alpha: f64) -> f64 {
    ce + alpha * div
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_examples() {
        assert!((kde_pdf(&[2.0], 1.0, 2.0).unwrap() - 0.39894228).abs() < 1e-8);
        assert!((kde_pdf(&[2.0], 1.0, 3.0).unwrap() - 0.24197072).abs() < 1e-8);
        assert!((kde_pdf(&[0.0, 4.0], 1.0, 2.0).unwrap() - 0.05399097).abs() < 1e-8);
        assert_eq!(kde_pdf(&[1.0], 0.0, 0.0), Err(ObjectiveError::Bandwidth(0.0)));
        assert_eq!(kde_pdf(&[], 1.0, 0.0), Err(ObjectiveError::NoHeads));
    }

    #[test]
    fn kde_integrates_to_one() {
        for (thetas, bw) in [
            (vec![1.0, 5.0, 10.0, 20.0], 0.5),
            (vec![3.0], 2.0),
            (vec![0.1, 0.2], 0.05),
        ] {
            let lo = thetas.iter().cloned().fold(f64::INFINITY, f64::min) - 8.0 * bw;
            let hi = thetas.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 8.0 * bw;
            let steps = 200_000;
            let h = (hi - lo) / steps as f64;
            let mut area = 0.5 * (kde(&thetas, bw, lo) + kde(&thetas, bw, hi));
            for k in 1..steps {
                area += kde(&thetas, bw, lo + k as f64 * h);
            }
            area *= h;
            assert!((area - 1.0).abs() < 1e-4, "{thetas:?}: {area}");
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert!((l - 2.06e-9).abs() < 1e-11);
        let (_, g) = cross_entropy(&[0.0, 0.0], 1).unwrap();
        assert_eq!(g, vec![0.5, -0.5]);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
        assert!(cross_entropy(&[0.0], 0).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(0.7, -1.4, 0.1) - 0.56).abs() < 1e-12);
        assert_eq!(total_loss(0.7, -1.4, 0.0), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 3.0), 0.0);
    }

    #[test]
    fn single_head_gradient_vanishes() {
        let cfg = DiversityConfig {
            bandwidth: 0.7,
            samples: 500,
            alpha: 1.0,
        };
        let (_, g) = diversity_loss(&[4.2], &cfg, 3).unwrap();
        assert!(g[0].abs() < 1e-12);
    }

    #[test]
    fn loss_is_negative_entropy() {
        let thetas = [0.3, 1.2, 2.0];
        let cfg = DiversityConfig {
            bandwidth: 0.4,
            samples: 300,
            alpha: 1.0,
        };
        let (loss, _) = diversity_loss(&thetas, &cfg, 17).unwrap();
        let h = entropy_mc(&thetas, cfg.bandwidth, cfg.samples, 17).unwrap();
        assert!((loss + h).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_common_random_number_differences() {
        let thetas = vec![0.8, 1.1, 2.5, 2.7];
        let cfg = DiversityConfig {
            bandwidth: 0.5,
            samples: 200,
            alpha: 1.0,
        };
        let (_, g) = diversity_loss(&thetas, &cfg, 99).unwrap();
        let step = 1e-5;
        for h in 0..thetas.len() {
            let mut up = thetas.clone();
            let mut down = thetas.clone();
            up[h] += step;
            down[h] -= step;
            let fd =
                (diversity_loss(&up, &cfg, 99).unwrap().0 - diversity_loss(&down, &cfg, 99).unwrap().0) / (2.0 * step);
            let rel = (g[h] - fd).abs() / g[h].abs().max(1e-12);
            assert!(rel < 1e-3, "head {h}: {} vs {fd}", g[h]);
        }
    }

    #[test]
    fn entropy_is_permutation_and_translation_invariant() {
        let a = [0.5, 1.7, 3.0];
        let b = [3.0, 0.5, 1.7];
        let shifted: Vec<f64> = a.iter().map(|t| t + 10.0).collect();
        let ha = entropy_mc(&a, 0.5, 1000, 5).unwrap();
        let hb = entropy_mc(&b, 0.5, 1000, 5).unwrap();
        let hs = entropy_mc(&shifted, 0.5, 1000, 5).unwrap();
        assert!((ha - hb).abs() < 1e-12);
        assert!((ha - hs).abs() < 1e-10);
    }
}
