//! Scored-pair and FLOP accounting with wall-time comparison of pruned and
//! dense-masked attention.
//!
//! FLOP convention per scored pair: `2·d_k` for the query-key distance,
//! `d_k` for the value aggregation and 6 scalar ops for prior, exponent and
//! normalization bookkeeping.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{dense_masked_oracle, psa_head_forward, AttentionPosterior, ModelParams, Pruning};
use crate::grid::{Bag, Coord};

pub const WEIGHT_TOLERANCE: f64 = 1e-6;
pub const CONTEXT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("pruned attention disagrees with the dense oracle on n={n}, head {head}: weight error {weight_error:e}, context error {context_error:e}")]
    Mismatch {
        n: usize,
        head: usize,
        weight_error: f64,
        context_error: f64,
    },
    #[error("grid side must be positive")]
    EmptyGrid,
}

pub fn flops_per_pair(d_k: usize) -> u64 {
    3 * d_k as u64 + 6
}

/// Largest `|w_ij − w'_ij|` over the union of both supports.
pub fn max_weight_error(a: &AttentionPosterior, b: &AttentionPosterior) -> f64 {
    assert_eq!(a.n(), b.n());
    let mut worst = 0.0f64;
    for i in 0..a.n() {
        for (x, y) in [(a, b), (b, a)] {
            let (cols, w) = x.row(i);
            for (&j, &v) in cols.iter().zip(w) {
                worst = worst.max((v - y.weight(i, j)).abs());
            }
        }
    }
    worst
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0f64, |m, x, y| m.max((x - y).abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub n: usize,
    /// Effective pruning radius per head.
    pub radii: Vec<f64>,
    /// Scores evaluated by the pruned kernel, summed over heads.
    pub pruned_pairs: u64,
    /// `n²` per head, summed over heads.
    pub dense_pairs: u64,
    pub reduction: f64,
    pub pruned_flops: u64,
    pub dense_flops: u64,
    pub pruned_seconds: f64,
    pub dense_seconds: f64,
    pub max_weight_error: f64,
    pub max_context_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tau: f64,
    pub k_max: f64,
    pub d_k: usize,
    pub rows: Vec<CostRow>,
}

/// A full `side × side` grid bag with standard normal embeddings.
pub fn full_grid_bag(side: usize, dim: usize, seed: u64) -> Bag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side * side;
    let coords: Vec<Coord> = (0..n)
        .map(|c| Coord::new((c / side) as i32, (c % side) as i32))
        .collect();
    let emb = Array2::from_shape_simple_fn((n, dim), || StandardNormal.sample(&mut rng));
    Bag::new(format!("grid{side}"), coords, emb, 0).expect("valid grid bag")
}

/// Runs every head of `params` pruned and dense on full square grids of the
/// given sides, checks equivalence, and reports counts and timings.
pub fn flop_report(
    sides: &[usize],
    params: &ModelParams,
    pruning: &Pruning,
    seed: u64,
) -> Result<CostReport, BenchError> {
    let shape = params.shape();
    let mut rows = Vec::with_capacity(sides.len());
    for &side in sides {
        if side == 0 {
            return Err(BenchError::EmptyGrid);
        }
        let bag = full_grid_bag(side, shape.input_dim, seed);
        let n = bag.len();
        let mut row = CostRow {
            n,
            radii: Vec::with_capacity(shape.heads),
            pruned_pairs: 0,
            dense_pairs: 0,
            reduction: 0.0,
            pruned_flops: 0,
            dense_flops: 0,
            pruned_seconds: 0.0,
            dense_seconds: 0.0,
            max_weight_error: 0.0,
            max_context_error: 0.0,
        };
        for (h, head) in params.heads.iter().enumerate() {
            let t0 = Instant::now();
            let (post, ctx) = psa_head_forward(&bag, head, pruning);
            let t1 = Instant::now();
            let (dense, dense_ctx) = dense_masked_oracle(&bag, head, pruning.tau(), pruning.k_max());
            let t2 = Instant::now();
            let weight_error = max_weight_error(&post, &dense);
            let context_error = max_abs_diff(&ctx, &dense_ctx);
            if !(weight_error <= WEIGHT_TOLERANCE && context_error <= CONTEXT_TOLERANCE) {
                return Err(BenchError::Mismatch {
                    n,
                    head: h,
                    weight_error,
                    context_error,
                });
            }
            row.radii.push(post.radius());
            row.pruned_pairs += post.scored_pairs() as u64;
            row.dense_pairs += dense.scored_pairs() as u64;
            row.pruned_seconds += (t1 - t0).as_secs_f64();
            row.dense_seconds += (t2 - t1).as_secs_f64();
            row.max_weight_error = row.max_weight_error.max(weight_error);
            row.max_context_error = row.max_context_error.max(context_error);
        }
        let per_pair = flops_per_pair(shape.d_k);
        row.reduction = row.dense_pairs as f64 / row.pruned_pairs as f64;
        row.pruned_flops = row.pruned_pairs * per_pair;
        row.dense_flops = row.dense_pairs * per_pair;
        rows.push(row);
    }
    Ok(CostReport {
        tau: pruning.tau(),
        k_max: pruning.k_max(),
        d_k: shape.d_k,
        rows,
    })
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "n,radii,pruned_pairs,dense_pairs,reduction,pruned_flops,dense_flops,pruned_seconds,dense_seconds,max_weight_error,max_context_error\n",
        );
        for r in &self.rows {
            let radii: Vec<String> = r.radii.iter().map(f64::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.n,
                radii.join(";"),
                r.pruned_pairs,
                r.dense_pairs,
                r.reduction,
                r.pruned_flops,
                r.dense_flops,
                r.pruned_seconds,
                r.dense_seconds,
                r.max_weight_error,
                r.max_context_error
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("tau = {}, K_max = {}, d_k = {}\n", self.tau, self.k_max, self.d_k);
        let _ = writeln!(
            out,
            "{:>7} {:>14} {:>14} {:>9} {:>14} {:>11} {:>11}",
            "n", "pruned pairs", "dense pairs", "reduction", "pruned FLOPs", "pruned ms", "dense ms"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>7} {:>14} {:>14} {:>8.2}x {:>14} {:>11.3} {:>11.3}",
                r.n,
                r.pruned_pairs,
                r.dense_pairs,
                r.reduction,
                r.pruned_flops,
                r.pruned_seconds * 1e3,
                r.dense_seconds * 1e3
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ModelShape;
    use crate::decay::{DecayFamily, DecayPrior};

    fn params_with_radius(radius: f64, tau: f64, dim: usize) -> ModelParams {
        let mut shape = ModelShape::new(dim);
        shape.heads = 1;
        let mut p = ModelParams::init(&shape, tau, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.heads[0].decay = DecayPrior::from_radius(DecayFamily::Gaussian, radius, tau).unwrap();
        p
    }

    #[test]
    fn dense_pairs_are_n_squared() {
        let p = params_with_radius(3.0, 1e-3, 4);
        let report = flop_report(&[10], &p, &Pruning::default(), 1).unwrap();
        assert_eq!(report.rows[0].dense_pairs, 10_000);
        assert!(report.rows[0].reduction >= 1.0);
    }

    #[test]
    fn pair_count_matches_ball_sizes() {
        let p = params_with_radius(1.0, 1e-3, 4);
        let report = flop_report(&[10], &p, &Pruning::default(), 1).unwrap();
        // radius 1: 5-point stencil, minus 4·10 missing boundary links
        assert_eq!(report.rows[0].pruned_pairs, 500 - 40);
        assert_eq!(report.rows[0].pruned_flops, 460 * flops_per_pair(4));
    }

    #[test]
    fn reduction_grows_with_tau() {
        let p = params_with_radius(4.0, 1e-3, 4);
        let mut last = 0.0;
        for tau in [1e-4, 1e-3, 1e-2, 1e-1] {
            let r = flop_report(&[12], &p, &Pruning::new(tau, 32.0).unwrap(), 2).unwrap();
            assert!(r.rows[0].reduction >= last);
            last = r.rows[0].reduction;
        }
    }

    #[test]
    fn report_formats() {
        let p = params_with_radius(2.0, 1e-3, 4);
        let r = flop_report(&[4, 6], &p, &Pruning::default(), 3).unwrap();
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(r.to_table().contains("reduction"));
    }
}
