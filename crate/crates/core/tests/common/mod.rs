#![allow(dead_code)]

use ndarray::Array2;
use psa_mil::grid::{Bag, Coord, Dataset};
use psa_mil::train::roc_auc;
use rand::Rng;
use rand_distr::StandardNormal;

/// Bag with `n` distinct random tiles inside a `side × side` window.
pub fn random_bag<R: Rng>(rng: &mut R, n: usize, side: i32, dim: usize) -> Bag {
    let mut cells: Vec<Coord> = (0..side * side).map(|c| Coord::new(c / side, c % side)).collect();
    for i in 0..n {
        let j = rng.gen_range(i..cells.len());
        cells.swap(i, j);
    }
    cells.truncate(n);
    let emb = Array2::from_shape_simple_fn((n, dim), || rng.sample::<f32, _>(StandardNormal));
    Bag::new("r", cells, emb, 0).unwrap()
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let sign = if k as i64 % 2 == 1 { 1.0 } else { -1.0 };
        p += 2.0 * sign * (-2.0 * k * k * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}

const PROBE_QUANTILES: usize = 16;

fn norm_features(bag: &Bag) -> Vec<f64> {
    let x = bag.features();
    let mut norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    norms.sort_by(f64::total_cmp);
    (0..PROBE_QUANTILES)
        .map(|q| norms[(q * (norms.len() - 1)) / (PROBE_QUANTILES - 1)])
        .collect()
}

/// Test AUC of a logistic regression on sorted instance-norm quantiles.
pub fn sorted_norm_probe_auc(ds: &Dataset) -> f64 {
    let train: Vec<(Vec<f64>, f64)> = ds.train.iter().map(|b| (norm_features(b), b.label() as f64)).collect();
    let dim = PROBE_QUANTILES;
    let mut mean = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for (f, _) in &train {
        for k in 0..dim {
            mean[k] += f[k] / train.len() as f64;
        }
    }
    for (f, _) in &train {
        for k in 0..dim {
            sd[k] += (f[k] - mean[k]).powi(2) / train.len() as f64;
        }
    }
    let z = |f: &[f64]| -> Vec<f64> { (0..dim).map(|k| (f[k] - mean[k]) / sd[k].sqrt().max(1e-12)).collect() };
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (f, y) in &train {
            let x = z(f);
            let s: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-s).exp()) - y;
            for k in 0..dim {
                gw[k] += err * x[k] / train.len() as f64;
            }
            gb += err / train.len() as f64;
        }
        for k in 0..dim {
            w[k] -= 0.5 * gw[k];
        }
        b -= 0.5 * gb;
    }
    let scores: Vec<f64> = ds
        .test
        .iter()
        .map(|bag| b + z(&norm_features(bag)).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>())
        .collect();
    let labels: Vec<bool> = ds.test.iter().map(|bag| bag.label() == 1).collect();
    roc_auc(&scores, &labels).unwrap()
}
