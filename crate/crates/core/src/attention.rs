//! Spatially pruned posterior attention, multi-head composition and
//! attention pooling.
//!
//! For a query tile `i` and a key tile `j` in its neighborhood the score is
//!
//! ```text
//! s_ij = -‖q_i - k_j‖² / (2√d_k) + ln f(d_ij | θ)
//! ```
//!
//! i.e. the log of an isotropic Gaussian likelihood with variance `√d_k`
//! plus the log of the distance-decay prior. The row softmax of `s_ij` is the
//! posterior responsibility of key `j` for query `i`. Keys with
//! `f(d_ij|θ) < τ` are never scored: the support of row `i` is the closed
//! ball of radius `min(f⁻¹(τ|θ), K_max)` around tile `i`.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decay::{initial_radii, DecayError, DecayFamily, DecayPrior};
use crate::grid::{chebyshev_index, neighborhood_index, pairwise_distance, Bag, Coord, NeighborhoodIndex};

/// Query/key/value projections of one head plus its decay prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub decay: DecayPrior,
}

impl HeadParams {
    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }
}

/// Layer sizes of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub classes: usize,
    pub family: DecayFamily,
}

impl ModelShape {
    /// Defaults for a given input dimension: 4 heads, `d_k = d_model = d_attn = d`, two classes.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            heads: 4,
            d_k: input_dim,
            d_model: input_dim,
            d_attn: input_dim,
            classes: 2,
            family: DecayFamily::Gaussian,
        }
    }
}

/// All learnable parameters.
///
/// The same structure doubles as the gradient container; see
/// [`ModelParams::zeros_like`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub heads: Vec<HeadParams>,
    /// `(H·d_k) × d_model`
    pub w_out: Array2<f64>,
    /// `d_model × d_attn`
    pub pool_v: Array2<f64>,
    /// `d_attn`
    pub pool_w: Array1<f64>,
    /// `d_model × C`
    pub cls_w: Array2<f64>,
    /// `C`
    pub cls_b: Array1<f64>,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

impl ModelParams {
    /// Random initialization with `1/√fan_in` scaled Gaussians.
    ///
    /// Head `h` starts with the decay scale whose pruning radius at `tau`
    /// sits on a geometric ladder from 2 to 16 tiles.
    pub fn init<R: Rng>(shape: &ModelShape, tau: f64, rng: &mut R) -> Result<Self, DecayError> {
        let d = shape.input_dim;
        let proj_std = 1.0 / (d as f64).sqrt();
        let heads = initial_radii(shape.heads)
            .into_iter()
            .map(|r| {
                Ok(HeadParams {
                    w_q: gaussian_matrix(rng, d, shape.d_k, proj_std),
                    w_k: gaussian_matrix(rng, d, shape.d_k, proj_std),
                    w_v: gaussian_matrix(rng, d, shape.d_k, proj_std),
                    decay: DecayPrior::from_radius(shape.family, r, tau)?,
                })
            })
            .collect::<Result<Vec<_>, DecayError>>()?;
        let concat = shape.heads * shape.d_k;
        Ok(Self {
            heads,
            w_out: gaussian_matrix(rng, concat, shape.d_model, 1.0 / (concat as f64).sqrt()),
            pool_v: gaussian_matrix(rng, shape.d_model, shape.d_attn, 1.0 / (shape.d_model as f64).sqrt()),
            pool_w: gaussian_matrix(rng, 1, shape.d_attn, 1.0 / (shape.d_attn as f64).sqrt())
                .into_shape_with_order(shape.d_attn)
                .unwrap(),
            cls_w: gaussian_matrix(rng, shape.d_model, shape.classes, 1.0 / (shape.d_model as f64).sqrt()),
            cls_b: Array1::zeros(shape.classes),
        })
    }

    pub fn shape(&self) -> ModelShape {
        let h0 = &self.heads[0];
        ModelShape {
            input_dim: h0.w_q.nrows(),
            heads: self.heads.len(),
            d_k: h0.d_k(),
            d_model: self.w_out.ncols(),
            d_attn: self.pool_v.ncols(),
            classes: self.cls_b.len(),
            family: h0.decay.family,
        }
    }

    /// Same layout with every scalar (including raw decay values) set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for block in z.blocks_mut() {
            block.fill(0.0);
        }
        z
    }

    /// Mutable views over every learnable block in a fixed order:
    /// per head `w_q, w_k, w_v, raw`, then `w_out, pool_v, pool_w, cls_w, cls_b`.
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        fn standard(a: &mut Array2<f64>) {
            if !a.is_standard_layout() {
                *a = a.as_standard_layout().into_owned();
            }
        }
        for h in &mut self.heads {
            standard(&mut h.w_q);
            standard(&mut h.w_k);
            standard(&mut h.w_v);
        }
        standard(&mut self.w_out);
        standard(&mut self.pool_v);
        standard(&mut self.cls_w);
        let mut out: Vec<&mut [f64]> = Vec::new();
        for h in &mut self.heads {
            out.push(h.w_q.as_slice_mut().expect("standard layout"));
            out.push(h.w_k.as_slice_mut().expect("standard layout"));
            out.push(h.w_v.as_slice_mut().expect("standard layout"));
            out.push(std::slice::from_mut(&mut h.decay.raw));
        }
        out.push(self.w_out.as_slice_mut().expect("standard layout"));
        out.push(self.pool_v.as_slice_mut().expect("standard layout"));
        out.push(self.pool_w.as_slice_mut().expect("standard layout"));
        out.push(self.cls_w.as_slice_mut().expect("standard layout"));
        out.push(self.cls_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.clone().blocks_mut().iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut c = self.clone();
        c.blocks_mut().into_iter().flat_map(|b| b.to_vec()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for block in self.blocks_mut() {
            let len = block.len();
            block.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        assert_eq!(pos, flat.len(), "flat vector length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.heads.iter().map(|h| h.decay.theta()).collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PruningError {
    #[error(transparent)]
    Tau(#[from] DecayError),
    #[error("radius cap must be non-negative, got {0}")]
    BadCap(f64),
}

/// Threshold `τ` on the prior and hard radius cap `K_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pruning {
    tau: f64,
    k_max: f64,
}

impl Pruning {
    pub fn new(tau: f64, k_max: f64) -> Result<Self, PruningError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(DecayError::TauOutOfRange(tau).into());
        }
        if k_max.is_nan() || k_max < 0.0 {
            return Err(PruningError::BadCap(k_max));
        }
        Ok(Self { tau, k_max })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn k_max(&self) -> f64 {
        self.k_max
    }

    /// `min(f⁻¹(τ|θ), K_max)`.
    pub fn radius(&self, prior: &DecayPrior) -> f64 {
        prior
            .inverse(self.tau)
            .expect("tau validated on construction")
            .min(self.k_max)
    }
}

impl Default for Pruning {
    fn default() -> Self {
        Self { tau: 1e-3, k_max: 32.0 }
    }
}

/// Which attention variant a head runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Decay prior inside the score, support pruned at `f(d|θ) ≥ τ`.
    Psa,
    /// No prior, every tile attends to every tile.
    NonSpatial,
    /// No prior, support is the Chebyshev ball of the given size.
    KLocal(u32),
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionMode::Psa => f.write_str("psa"),
            AttentionMode::NonSpatial => f.write_str("non_spatial"),
            AttentionMode::KLocal(k) => write!(f, "klocal:{k}"),
        }
    }
}

impl FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "psa" => Ok(AttentionMode::Psa),
            "non_spatial" => Ok(AttentionMode::NonSpatial),
            other => match other.strip_prefix("klocal:") {
                Some(k) => k
                    .parse()
                    .map(AttentionMode::KLocal)
                    .map_err(|e| format!("bad klocal size {k:?}: {e}")),
                None => Err(format!(
                    "unknown attention mode {other:?} (expected psa, non_spatial or klocal:K)"
                )),
            },
        }
    }
}

/// Sparse row-stochastic attention weights of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPosterior {
    support: NeighborhoodIndex,
    weights: Vec<f64>,
    scored_pairs: usize,
}

impl AttentionPosterior {
    pub fn radius(&self) -> f64 {
        self.support.radius()
    }

    pub fn support(&self) -> &NeighborhoodIndex {
        &self.support
    }

    pub fn n(&self) -> usize {
        self.support.len()
    }

    /// Number of `(i, j)` scores evaluated to produce these weights.
    pub fn scored_pairs(&self) -> usize {
        self.scored_pairs
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        (self.support.neighbors(i), &self.weights[self.support.row_range(i)])
    }

    /// `w_ij`, zero outside the support.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (cols, w) = self.row(i);
        cols.binary_search(&j).map(|k| w[k]).unwrap_or(0.0)
    }

    /// Dense `n × n` copy; for tests and small bags.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            let (cols, w) = self.row(i);
            for (&j, &v) in cols.iter().zip(w) {
                out[[i, j]] = v;
            }
        }
        out
    }

    pub(crate) fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Per-head `Q`, `K`, `V`.
#[derive(Debug, Clone)]
pub(crate) struct Projections {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

fn project(x: &Array2<f64>, head: &HeadParams) -> Projections {
    Projections {
        q: x.dot(&head.w_q),
        k: x.dot(&head.w_k),
        v: x.dot(&head.w_v),
    }
}

/// Score, softmax and aggregate over `support`. `prior = None` drops the
/// `ln f` term.
fn attend(
    proj: &Projections,
    coords: &[Coord],
    support: NeighborhoodIndex,
    prior: Option<&DecayPrior>,
) -> (AttentionPosterior, Array2<f64>) {
    let n = proj.q.nrows();
    let dk = proj.q.ncols();
    let inv_two_sigma2 = 1.0 / (2.0 * (dk as f64).sqrt());
    let q = proj.q.as_slice().expect("standard layout");
    let k = proj.k.as_slice().expect("standard layout");
    let v = proj.v.as_slice().expect("standard layout");
    let mut weights = vec![0.0; support.pair_count()];
    let mut context = Array2::zeros((n, dk));
    {
        let ctx = context.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let range = support.row_range(i);
            let cols = support.neighbors(i);
            let row = &mut weights[range];
            let qi = &q[i * dk..(i + 1) * dk];
            let mut max = f64::NEG_INFINITY;
            for (w, &j) in row.iter_mut().zip(cols) {
                let kj = &k[j * dk..(j + 1) * dk];
                let dist2: f64 = qi.iter().zip(kj).map(|(a, b)| (a - b) * (a - b)).sum();
                let mut s = -dist2 * inv_two_sigma2;
                if let Some(p) = prior {
                    s += p.log_eval(pairwise_distance(coords[i], coords[j]));
                }
                *w = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for w in row.iter_mut() {
                *w = (*w - max).exp();
                total += *w;
            }
            let ci = &mut ctx[i * dk..(i + 1) * dk];
            for (w, &j) in row.iter_mut().zip(cols) {
                *w /= total;
                let vj = &v[j * dk..(j + 1) * dk];
                for (c, &x) in ci.iter_mut().zip(vj) {
                    *c += *w * x;
                }
            }
        }
    }
    let scored_pairs = support.pair_count();
    (
        AttentionPosterior {
            support,
            weights,
            scored_pairs,
        },
        context,
    )
}

/// Support of one head under `mode`.
pub fn head_support(coords: &[Coord], head: &HeadParams, mode: AttentionMode, pruning: &Pruning) -> NeighborhoodIndex {
    match mode {
        AttentionMode::Psa => neighborhood_index(coords, pruning.radius(&head.decay)),
        AttentionMode::NonSpatial => NeighborhoodIndex::full(coords.len()),
        AttentionMode::KLocal(k) => chebyshev_index(coords, k),
    }
}

/// Pruned spatial attention of a single head.
pub fn psa_head_forward(bag: &Bag, head: &HeadParams, pruning: &Pruning) -> (AttentionPosterior, Array2<f64>) {
    let proj = project(&bag.features(), head);
    let support = head_support(bag.coords(), head, AttentionMode::Psa, pruning);
    attend(&proj, bag.coords(), support, Some(&head.decay))
}

/// Reference implementation: full `n × n` scores in straight loops, entries
/// with `f(d_ij|θ) < tau` or `d_ij > k_max` set to `-∞` before the softmax.
///
/// Quadratic in `n`; used to validate [`psa_head_forward`].
pub fn dense_masked_oracle(bag: &Bag, head: &HeadParams, tau: f64, k_max: f64) -> (AttentionPosterior, Array2<f64>) {
    let x = bag.features();
    let (n, d) = x.dim();
    let dk = head.d_k();
    let matmul = |w: &Array2<f64>| {
        let mut out = vec![0.0; n * dk];
        for i in 0..n {
            for c in 0..dk {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += x[[i, r]] * w[[r, c]];
                }
                out[i * dk + c] = acc;
            }
        }
        out
    };
    let (q, k, v) = (matmul(&head.w_q), matmul(&head.w_k), matmul(&head.w_v));
    let sigma2 = (dk as f64).sqrt();
    let coords = bag.coords();
    let mut rows = Vec::with_capacity(n);
    let mut weights = Vec::new();
    let mut context = Array2::zeros((n, dk));
    let mut scores = vec![f64::NEG_INFINITY; n];
    for i in 0..n {
        for (j, s) in scores.iter_mut().enumerate() {
            let dij = pairwise_distance(coords[i], coords[j]);
            let f = head.decay.eval(dij);
            if f < tau || dij > k_max {
                *s = f64::NEG_INFINITY;
                continue;
            }
            let mut sq = 0.0;
            for c in 0..dk {
                let diff = q[i * dk + c] - k[j * dk + c];
                sq += diff * diff;
            }
            *s = -sq / (2.0 * sigma2) + f.ln();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let mut kept = Vec::new();
        for (j, s) in scores.iter().enumerate() {
            if *s == f64::NEG_INFINITY {
                continue;
            }
            let w = (s - max).exp() / denom;
            kept.push(j);
            weights.push(w);
            for c in 0..dk {
                context[[i, c]] += w * v[j * dk + c];
            }
        }
        rows.push(kept);
    }
    (
        AttentionPosterior {
            support: NeighborhoodIndex::from_rows(k_max, rows),
            weights,
            scored_pairs: n * n,
        },
        context,
    )
}

/// Output of [`attention_pool`].
#[derive(Debug, Clone)]
pub struct PoolOutput {
    /// Slide embedding `Σ_i score_i · token_i`.
    pub embedding: Array1<f64>,
    /// Softmax pooling weights, one per instance.
    pub scores: Array1<f64>,
    /// `tanh(T · V_pool)`.
    pub(crate) hidden: Array2<f64>,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|a| (a - max).exp());
    let total = e.sum();
    e / total
}

/// Attention pooling: `a_i = w · tanh(V^T t_i)`, `score = softmax(a)`.
pub fn attention_pool(tokens: &Array2<f64>, pool_v: &Array2<f64>, pool_w: &Array1<f64>) -> PoolOutput {
    let hidden = tokens.dot(pool_v).mapv(f64::tanh);
    let logits = hidden.dot(pool_w);
    let scores = softmax(&logits);
    let embedding = tokens.t().dot(&scores);
    PoolOutput {
        embedding,
        scores,
        hidden,
    }
}

/// One head's forward state.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub posterior: AttentionPosterior,
    pub context: Array2<f64>,
    pub(crate) proj: Projections,
}

/// Full forward pass of one bag.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub heads: Vec<HeadOutput>,
    /// `Concat(context_1, …, context_H)`.
    pub concat: Array2<f64>,
    pub tokens: Array2<f64>,
    pub pool: PoolOutput,
    pub logits: Array1<f64>,
}

impl ModelOutput {
    pub fn probabilities(&self) -> Array1<f64> {
        softmax(&self.logits)
    }

    pub fn scored_pairs(&self) -> usize {
        self.heads.iter().map(|h| h.posterior.scored_pairs()).sum()
    }
}

/// Per-head supports for `bag` under `mode`.
pub fn model_supports(
    bag: &Bag,
    params: &ModelParams,
    mode: AttentionMode,
    pruning: &Pruning,
) -> Vec<NeighborhoodIndex> {
    params
        .heads
        .iter()
        .map(|h| head_support(bag.coords(), h, mode, pruning))
        .collect()
}

/// Forward pass with supports fixed in advance.
pub fn forward_with_supports(
    bag: &Bag,
    params: &ModelParams,
    mode: AttentionMode,
    supports: Vec<NeighborhoodIndex>,
) -> ModelOutput {
    assert_eq!(supports.len(), params.heads.len());
    let x = bag.features();
    let n = bag.len();
    let heads: Vec<HeadOutput> = params
        .heads
        .iter()
        .zip(supports)
        .map(|(head, support)| {
            let proj = project(&x, head);
            let prior = matches!(mode, AttentionMode::Psa).then_some(&head.decay);
            let (posterior, context) = attend(&proj, bag.coords(), support, prior);
            HeadOutput {
                posterior,
                context,
                proj,
            }
        })
        .collect();
    let dk = params.heads[0].d_k();
    let mut concat = Array2::zeros((n, dk * heads.len()));
    for (h, out) in heads.iter().enumerate() {
        concat.slice_mut(s![.., h * dk..(h + 1) * dk]).assign(&out.context);
    }
    let tokens = concat.dot(&params.w_out);
    let pool = attention_pool(&tokens, &params.pool_v, &params.pool_w);
    let logits = pool.embedding.dot(&params.cls_w) + &params.cls_b;
    ModelOutput {
        heads,
        concat,
        tokens,
        pool,
        logits,
    }
}

pub fn forward(bag: &Bag, params: &ModelParams, mode: AttentionMode, pruning: &Pruning) -> ModelOutput {
    let supports = model_supports(bag, params, mode, pruning);
    forward_with_supports(bag, params, mode, supports)
}

/// Multi-head PSA: per-head posteriors and `tokens = Concat(contexts) · W_out`.
pub fn multi_head_forward(
    bag: &Bag,
    params: &ModelParams,
    pruning: &Pruning,
) -> (Vec<AttentionPosterior>, Array2<f64>) {
    let out = forward(bag, params, AttentionMode::Psa, pruning);
    (out.heads.into_iter().map(|h| h.posterior).collect(), out.tokens)
}

/// Tokens of a comparison model (`NonSpatial` or `KLocal`); the decay
/// parameters are ignored.
pub fn baseline_forward(bag: &Bag, params: &ModelParams, mode: AttentionMode) -> Array2<f64> {
    forward(bag, params, mode, &Pruning::default()).tokens
}

/// Mean over head pairs of the mean per-tile ℓ2 distance between head contexts.
pub fn mean_inter_head_distance(out: &ModelOutput) -> f64 {
    let h = out.heads.len();
    if h < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..h {
        for b in a + 1..h {
            let diff = &out.heads[a].context - &out.heads[b].context;
            let per_tile: f64 = diff.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).sum::<f64>() / diff.nrows() as f64;
            total += per_tile;
            pairs += 1;
        }
    }
    total / pairs as f64
}
