//! Gradients, optimizer loop, training diagnostics and evaluation.

mod backprop;
pub mod gradcheck;
pub mod metrics;
pub mod optim;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    forward, forward_with_supports, mean_inter_head_distance, model_supports, AttentionMode, ModelParams, ModelShape,
    Pruning,
};
use crate::decay::{DecayError, DecayFamily};
use crate::grid::{Bag, Dataset, NeighborhoodIndex, Split};
use crate::objective::{cross_entropy, diversity_loss, total_loss, DiversityConfig, ObjectiveError};

pub use gradcheck::{finite_diff_check, model_gradcheck, GradCheckReport};
pub use metrics::{classification_metrics, roc_auc, Metrics, MetricsError};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} split is empty")]
    EmptySplit(Split),
    #[error("bags have embedding dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite parameters after step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Init(#[from] DecayError),
}

/// Architecture choices; unset sizes default to the input dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub heads: usize,
    pub d_k: Option<usize>,
    pub d_model: Option<usize>,
    pub d_attn: Option<usize>,
    pub family: DecayFamily,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            heads: 4,
            d_k: None,
            d_model: None,
            d_attn: None,
            family: DecayFamily::Gaussian,
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self, input_dim: usize, classes: usize) -> ModelShape {
        ModelShape {
            input_dim,
            heads: self.heads,
            d_k: self.d_k.unwrap_or(input_dim),
            d_model: self.d_model.unwrap_or(input_dim),
            d_attn: self.d_attn.unwrap_or(input_dim),
            classes,
            family: self.family,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub mode: AttentionMode,
    pub pruning: Pruning,
    pub diversity: DiversityConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Bags per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// EMA factor of the inter-head similarity series.
    pub smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            mode: AttentionMode::Psa,
            pruning: Pruning::default(),
            diversity: DiversityConfig::default(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 1,
            seed: 0,
            smoothing: 0.95,
        }
    }
}

/// Well-mixed 64-bit seed for `(base, stream)`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss components and gradient for one bag.
#[derive(Debug, Clone)]
pub struct GradOutput {
    pub ce: f64,
    pub diversity: f64,
    pub total: f64,
    pub grad: ModelParams,
    pub scored_pairs: usize,
    pub head_distance: f64,
}

/// Cross-entropy and its gradient with supports held fixed.
pub(crate) fn ce_gradient(
    bag: &Bag,
    params: &ModelParams,
    mode: AttentionMode,
    supports: Vec<NeighborhoodIndex>,
) -> Result<GradOutput, ObjectiveError> {
    let out = forward_with_supports(bag, params, mode, supports);
    let (ce, dlogits) = cross_entropy(out.logits.as_slice().unwrap(), bag.label())?;
    let grad = backprop::backward(
        &bag.features(),
        bag.coords(),
        params,
        mode,
        &out,
        &Array1::from_vec(dlogits),
    );
    Ok(GradOutput {
        ce,
        diversity: 0.0,
        total: ce,
        grad,
        scored_pairs: out.scored_pairs(),
        head_distance: mean_inter_head_distance(&out),
    })
}

/// Adds `alpha · ∂L_div/∂ρ_h` to the raw decay gradients and returns `L_div`.
pub(crate) fn add_diversity(
    grad: &mut ModelParams,
    params: &ModelParams,
    config: &DiversityConfig,
    seed: u64,
) -> Result<f64, ObjectiveError> {
    let (loss, dtheta) = diversity_loss(&params.thetas(), config, seed)?;
    for ((g, head), dt) in grad.heads.iter_mut().zip(&params.heads).zip(dtheta) {
        g.decay.raw += config.alpha * dt * head.decay.grad(0.0).dtheta_drho;
    }
    Ok(loss)
}

/// Gradient of the total loss with explicit supports. The diversity term is
/// only used by the spatial model.
pub fn grad_with_supports(
    bag: &Bag,
    params: &ModelParams,
    mode: AttentionMode,
    supports: Vec<NeighborhoodIndex>,
    diversity: &DiversityConfig,
    seed: u64,
) -> Result<GradOutput, ObjectiveError> {
    let mut out = ce_gradient(bag, params, mode, supports)?;
    if mode == AttentionMode::Psa {
        out.diversity = add_diversity(&mut out.grad, params, diversity, seed)?;
        out.total = total_loss(out.ce, out.diversity, diversity.alpha);
    }
    Ok(out)
}

/// Exact gradient of `L_CE + α L_div` for one bag at the current supports.
pub fn grad_all(
    bag: &Bag,
    params: &ModelParams,
    config: &TrainConfig,
    seed: u64,
) -> Result<GradOutput, ObjectiveError> {
    let supports = model_supports(bag, params, config.mode, &config.pruning);
    grad_with_supports(bag, params, config.mode, supports, &config.diversity, seed)
}

/// One optimizer step's diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub diversity: f64,
    pub total: f64,
    /// Per-head decay scale after the update.
    pub thetas: Vec<f64>,
    /// Per-head `⌈f⁻¹(τ|θ_h)⌉` after the update.
    pub radii: Vec<u64>,
    pub scored_pairs: usize,
    /// Mean ℓ2 distance between head contexts in this step.
    pub head_distance: f64,
    /// EMA of `1 / (1 + head_distance)`.
    pub head_similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub heads: usize,
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn header(heads: usize) -> String {
        let mut cols = vec!["step", "epoch", "ce", "diversity", "total"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        cols.extend((0..heads).map(|h| format!("theta_{h}")));
        cols.extend((0..heads).map(|h| format!("k_{h}")));
        cols.extend(["scored_pairs", "head_distance", "head_similarity"].map(String::from));
        cols.join(",")
    }

    /// CSV with one row per step; floats use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = Self::header(self.heads);
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![
                r.step.to_string(),
                r.epoch.to_string(),
                r.ce.to_string(),
                r.diversity.to_string(),
                r.total.to_string(),
            ];
            fields.extend(r.thetas.iter().map(f64::to_string));
            fields.extend(r.radii.iter().map(u64::to_string));
            fields.push(r.scored_pairs.to_string());
            fields.push(r.head_distance.to_string());
            fields.push(r.head_similarity.to_string());
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// `⌈f⁻¹(τ|θ)⌉` for each head of `params`.
pub fn head_radii(params: &ModelParams, tau: f64) -> Vec<u64> {
    params
        .heads
        .iter()
        .map(|h| h.decay.inverse(tau).map(|r| r.ceil() as u64).unwrap_or(0))
        .collect()
}

/// Mutable training state carried between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub step: usize,
    similarity_ema: Option<f64>,
}

impl TrainState {
    pub fn new(params: ModelParams, config: &TrainConfig) -> Self {
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, params.num_scalars());
        Self {
            params,
            optimizer,
            step: 0,
            similarity_ema: None,
        }
    }
}

/// Averages per-bag gradients over `batch` (summed in bag order), adds the
/// diversity term once and applies one optimizer update.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Bag],
    config: &TrainConfig,
    epoch: usize,
) -> Result<TraceRow, TrainError> {
    let params = &state.params;
    let per_bag: Vec<GradOutput> = batch
        .par_iter()
        .map(|bag| {
            let supports = model_supports(bag, params, config.mode, &config.pruning);
            ce_gradient(bag, params, config.mode, supports)
        })
        .collect::<Result<_, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.flatten();
    grad.fill(0.0);
    let mut ce = 0.0;
    let mut scored_pairs = 0;
    let mut head_distance = 0.0;
    for g in &per_bag {
        for (acc, v) in grad.iter_mut().zip(g.grad.flatten()) {
            *acc += scale * v;
        }
        ce += scale * g.ce;
        scored_pairs += g.scored_pairs;
        head_distance += scale * g.head_distance;
    }
    let mut grad_params = params.zeros_like();
    grad_params.assign_flat(&grad);
    let seed = derive_seed(config.seed, state.step as u64);
    let diversity = {
        let mut div_grad = params.zeros_like();
        let loss = add_diversity(&mut div_grad, params, &config.diversity, seed)?;
        if config.mode == AttentionMode::Psa {
            for (g, d) in grad_params.heads.iter_mut().zip(&div_grad.heads) {
                g.decay.raw += d.decay.raw;
            }
        }
        loss
    };
    let alpha = if config.mode == AttentionMode::Psa {
        config.diversity.alpha
    } else {
        0.0
    };

    let mut flat = state.params.flatten();
    state.optimizer.step(&mut flat, &grad_params.flatten());
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NonFinite { step: state.step });
    }
    state.params.assign_flat(&flat);

    let sim = 1.0 / (1.0 + head_distance);
    let ema = match state.similarity_ema {
        None => sim,
        Some(prev) => config.smoothing * prev + (1.0 - config.smoothing) * sim,
    };
    state.similarity_ema = Some(ema);
    let row = TraceRow {
        step: state.step,
        epoch,
        ce,
        diversity,
        total: total_loss(ce, diversity, alpha),
        thetas: state.params.thetas(),
        radii: head_radii(&state.params, config.pruning.tau()),
        scored_pairs,
        head_distance,
        head_similarity: ema,
    };
    state.step += 1;
    Ok(row)
}

/// Class probabilities for each bag.
pub fn predict(params: &ModelParams, bags: &[Bag], mode: AttentionMode, pruning: &Pruning) -> Vec<Vec<f64>> {
    bags.par_iter()
        .map(|bag| forward(bag, params, mode, pruning).probabilities().to_vec())
        .collect()
}

pub fn evaluate(
    params: &ModelParams,
    bags: &[Bag],
    mode: AttentionMode,
    pruning: &Pruning,
) -> Result<Metrics, MetricsError> {
    let probs = predict(params, bags, mode, pruning);
    let labels: Vec<usize> = bags.iter().map(Bag::label).collect();
    classification_metrics(&probs, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters of the epoch with the best validation AUC.
    pub params: ModelParams,
    pub final_params: ModelParams,
    pub best_epoch: usize,
    pub epochs: Vec<EpochSummary>,
    pub trace: TrainTrace,
}

impl FitResult {
    pub fn best_val(&self) -> &Metrics {
        &self.epochs[self.best_epoch].val
    }
}

/// Trains on the train split, selecting the epoch with the best validation
/// AUC (earliest wins ties).
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<FitResult, TrainError> {
    for split in [Split::Train, Split::Val] {
        if dataset.split(split).is_empty() {
            return Err(TrainError::EmptySplit(split));
        }
    }
    let train = &dataset.train;
    let dim = train[0].dim();
    for bag in train.iter().chain(&dataset.val) {
        if bag.dim() != dim {
            return Err(TrainError::DimensionMismatch {
                expected: dim,
                found: bag.dim(),
            });
        }
    }
    let classes = train
        .iter()
        .chain(&dataset.val)
        .map(Bag::label)
        .max()
        .unwrap_or(0)
        .max(1)
        + 1;
    let shape = config.model.resolve(dim, classes);
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = ModelParams::init(&shape, config.pruning.tau(), &mut init_rng)?;
    let mut state = TrainState::new(params, config);
    let mut trace = TrainTrace {
        heads: shape.heads,
        rows: Vec::new(),
    };
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let batch_size = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1 << 40 | epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Bag> = chunk.iter().map(|&i| &train[i]).collect();
            let row = train_step(&mut state, &batch, config, epoch)?;
            loss_sum += row.total;
            steps += 1;
            trace.rows.push(row);
        }
        let val = evaluate(&state.params, &dataset.val, config.mode, &config.pruning)?;
        if best.as_ref().is_none_or(|(_, auc, _)| val.auc > *auc) {
            best = Some((epoch, val.auc, state.params.clone()));
        }
        epochs.push(EpochSummary {
            epoch,
            train_loss: loss_sum / steps as f64,
            val,
        });
    }
    let (best_epoch, params) = match best {
        Some((e, _, p)) => (e, p),
        None => (0, state.params.clone()),
    };
    Ok(FitResult {
        params,
        final_params: state.params,
        best_epoch,
        epochs,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Coord;
    use ndarray::Array2;

    fn tiny_bag(label: usize) -> Bag {
        let coords: Vec<Coord> = (0..6).map(|i| Coord::new(i / 3, i % 3)).collect();
        let emb = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f32 * 0.3 - 0.6);
        Bag::new("t", coords, emb, label).unwrap()
    }

    fn tiny_params(seed: u64) -> ModelParams {
        let mut shape = ModelShape::new(3);
        shape.heads = 2;
        ModelParams::init(&shape, 1e-3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_params_bias_gradient() {
        let params = tiny_params(1).zeros_like();
        let cfg = TrainConfig {
            mode: AttentionMode::NonSpatial,
            ..TrainConfig::default()
        };
        let g = grad_all(&tiny_bag(1), &params, &cfg, 0).unwrap();
        assert_eq!(g.grad.cls_b.to_vec(), vec![0.5, -0.5]);
        let g = grad_all(&tiny_bag(0), &params, &cfg, 0).unwrap();
        assert_eq!(g.grad.cls_b.to_vec(), vec![-0.5, 0.5]);
    }

    #[test]
    fn alpha_shifts_raw_gradient_linearly() {
        let params = tiny_params(2);
        let bag = tiny_bag(1);
        let base = TrainConfig::default();
        let mut cfg0 = base;
        cfg0.diversity.alpha = 0.0;
        let mut cfg1 = base;
        cfg1.diversity.alpha = 0.3;
        let g0 = grad_all(&bag, &params, &cfg0, 7).unwrap();
        let g1 = grad_all(&bag, &params, &cfg1, 7).unwrap();
        let (_, dtheta) = diversity_loss(&params.thetas(), &cfg1.diversity, 7).unwrap();
        for (h, dt) in dtheta.iter().enumerate() {
            let sig = params.heads[h].decay.grad(0.0).dtheta_drho;
            let shift = g1.grad.heads[h].decay.raw - g0.grad.heads[h].decay.raw;
            assert!((shift - 0.3 * dt * sig).abs() < 1e-12);
        }
        let ce_only = ce_gradient(
            &bag,
            &params,
            AttentionMode::Psa,
            model_supports(&bag, &params, AttentionMode::Psa, &base.pruning),
        )
        .unwrap();
        assert_eq!(ce_only.grad.heads[0].decay.raw, g0.grad.heads[0].decay.raw);
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let params = tiny_params(3);
        let bag = tiny_bag(0);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let seed = derive_seed(cfg.seed, 0);
        let before = grad_all(&bag, &params, &cfg, seed).unwrap().total;
        let mut state = TrainState::new(params, &cfg);
        train_step(&mut state, &[&bag], &cfg, 0).unwrap();
        let after = grad_all(&bag, &state.params, &cfg, seed).unwrap().total;
        assert!(after <= before, "{after} > {before}");
        assert!(state.params.thetas().iter().all(|&t| t > 0.0));
    }

    #[test]
    fn trace_csv_shape() {
        let params = tiny_params(4);
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(params, &cfg);
        let bag = tiny_bag(1);
        let mut trace = TrainTrace {
            heads: 2,
            rows: Vec::new(),
        };
        for _ in 0..3 {
            trace.rows.push(train_step(&mut state, &[&bag], &cfg, 0).unwrap());
        }
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "step,epoch,ce,diversity,total,theta_0,theta_1,k_0,k_1,scored_pairs,head_distance,head_similarity"
        );
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 12));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
