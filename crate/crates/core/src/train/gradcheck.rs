//! Central finite-difference validation of the analytic gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{forward_with_supports, model_supports, AttentionMode, ModelParams, ModelShape, Pruning};
use crate::decay::DecayFamily;
use crate::grid::{Bag, Coord};
use crate::objective::{cross_entropy, diversity_loss, DiversityConfig};

use super::{derive_seed, grad_with_supports};

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Largest `|analytic − central difference| / max(1, |analytic|)` over all
/// coordinates of `point`.
pub fn finite_diff_check<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], analytic: &[f64], step: f64) -> f64 {
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(1.0));
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub bags: usize,
    pub scalars: usize,
    pub max_rel_error: f64,
    /// Bag index and flat parameter index of the worst entry.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn random_bag<R: Rng>(rng: &mut R, index: usize) -> Bag {
    let n = rng.gen_range(2..=12);
    let mut cells: Vec<Coord> = (0..25).map(|c| Coord::new(c / 5, c % 5)).collect();
    for i in 0..n {
        let j = rng.gen_range(i..cells.len());
        cells.swap(i, j);
    }
    cells.truncate(n);
    let emb = Array2::from_shape_simple_fn((n, 4), || rng.sample::<f32, _>(StandardNormal));
    let label = rng.gen_range(0..2);
    Bag::new(format!("gc{index}"), cells, emb, label).expect("valid random bag")
}

/// Checks `∂(L_CE + α L_div)` for every learnable scalar on 10 random tiny
/// bags (`n ≤ 12`, `d = 4`, two heads), with supports and Monte Carlo noise
/// held fixed across the perturbations.
pub fn model_gradcheck(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pruning = Pruning::default();
    let diversity = DiversityConfig {
        bandwidth: 0.5,
        samples: 16,
        alpha: 0.5,
    };
    let mut report = GradCheckReport {
        bags: 10,
        scalars: 0,
        max_rel_error: 0.0,
        worst: (0, 0),
        tolerance: GRADCHECK_TOLERANCE,
    };
    for b in 0..report.bags {
        let bag = random_bag(&mut rng, b);
        let shape = ModelShape {
            input_dim: 4,
            heads: 2,
            d_k: 4,
            d_model: 4,
            d_attn: 4,
            classes: 2,
            family: DecayFamily::ALL[b % 3],
        };
        let mut params = ModelParams::init(&shape, pruning.tau(), &mut rng).expect("valid shape");
        for head in &mut params.heads {
            head.decay.raw += rng.gen_range(-0.5..0.5);
        }
        let mode = AttentionMode::Psa;
        let supports = model_supports(&bag, &params, mode, &pruning);
        let mc_seed = derive_seed(seed, b as u64);
        let analytic = grad_with_supports(&bag, &params, mode, supports.clone(), &diversity, mc_seed)
            .expect("valid bag")
            .grad
            .flatten();
        let loss = |flat: &[f64]| {
            let mut p = params.clone();
            p.assign_flat(flat);
            let out = forward_with_supports(&bag, &p, mode, supports.clone());
            let (ce, _) = cross_entropy(out.logits.as_slice().unwrap(), bag.label()).unwrap();
            let (div, _) = diversity_loss(&p.thetas(), &diversity, mc_seed).unwrap();
            ce + diversity.alpha * div
        };
        let point = params.flatten();
        for i in 0..point.len() {
            let err = finite_diff_check(
                |x: &[f64]| {
                    let mut full = point.clone();
                    full[i] = x[0];
                    loss(&full)
                },
                &point[i..=i],
                &analytic[i..=i],
                GRADCHECK_STEP,
            );
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (b, i);
            }
        }
        report.scalars += point.len();
    }
    report
}
