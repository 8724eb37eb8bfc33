//! Slide-level classification metrics: ROC AUC by rank statistic, accuracy and F1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC is undefined when ground truth has a single class")]
    SingleClass,
    #[error("no predictions to evaluate")]
    Empty,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// Area under the ROC curve as the Mann-Whitney statistic; tied scores count half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != positive.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: positive.len(),
        });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            if positive[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        start = end;
    }
    let p = n_pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

fn f1_for(pred: &[usize], labels: &[usize], class: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in pred.iter().zip(labels) {
        match (p == class, l == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Metrics from per-bag class probabilities.
///
/// Two classes: AUC of the class-1 probability and F1 of class 1. More
/// classes: one-vs-rest AUC and F1, macro-averaged over the classes present.
pub fn classification_metrics(probs: &[Vec<f64>], labels: &[usize]) -> Result<Metrics, MetricsError> {
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: probs.len(),
            labels: labels.len(),
        });
    }
    let classes = probs[0].len();
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let accuracy = pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    if classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return Ok(Metrics {
            auc: roc_auc(&scores, &pos)?,
            accuracy,
            f1: f1_for(&pred, labels, 1),
        });
    }
    let present: Vec<usize> = (0..classes).filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return Err(MetricsError::SingleClass);
    }
    let mut auc = 0.0;
    let mut f1 = 0.0;
    for &c in &present {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        auc += roc_auc(&scores, &pos)?;
        f1 += f1_for(&pred, labels, c);
    }
    let k = present.len() as f64;
    Ok(Metrics {
        auc: auc / k,
        accuracy,
        f1: f1 / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.2, 0.8], &[true, false]).unwrap(), 0.0);
        assert_eq!(
            roc_auc(&[0.4, 0.4, 0.4, 0.4], &[true, false, true, false]).unwrap(),
            0.5
        );
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), Err(MetricsError::SingleClass));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let scores = [0.1, 0.5, 0.5, 0.3, 0.9, 0.5, 0.2];
        let labels = [false, true, false, true, true, false, false];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &pi) in labels.iter().enumerate() {
            for (j, &pj) in labels.iter().enumerate() {
                if pi && !pj {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        assert!((roc_auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
    }

    #[test]
    fn binary_metrics() {
        let probs = vec![vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7], vec![0.9, 0.1]];
        let m = classification_metrics(&probs, &[1, 1, 0, 0]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.f1, 0.5);
        assert_eq!(m.auc, 0.75);
    }

    #[test]
    fn multiclass_macro_metrics() {
        let probs = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.7, 0.2, 0.1],
        ];
        let m = classification_metrics(&probs, &[0, 1, 2, 0]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.auc, 1.0);
    }
}
