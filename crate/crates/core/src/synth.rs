//! Synthetic bags whose label depends only on where the signal tiles sit.
//!
//! Every bag is a full `G×G` grid of iid Gaussian noise embeddings. `k` tiles
//! get `+μ` on feature 0. In class 1 they form one 4-connected blob, in class
//! 0 no two of them are 4-adjacent, so both classes share the same multiset
//! distribution of instance vectors.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{encode_bag, format_manifest, Bag, Coord, Dataset, ManifestEntry, Split, MANIFEST_NAME};

/// Attempts at random greedy scattering before giving up.
const SCATTER_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("cannot place {k} pairwise non-adjacent tiles on a {g}x{g} grid")]
    Infeasible { k: usize, g: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub grid_size: usize,
    pub embed_dim: usize,
    pub signal_count: usize,
    pub signal_shift: f64,
    pub noise_std: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grid_size: 16,
            embed_dim: 8,
            signal_count: 8,
            signal_shift: 1.0,
            noise_std: 1.0,
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 50,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let g = self.grid_size;
        if g == 0 || g > i32::MAX as usize {
            return Err(SynthError::Spec(format!("grid size must be positive, got {g}")));
        }
        if self.embed_dim == 0 {
            return Err(SynthError::Spec("embedding dimension must be positive".into()));
        }
        if self.signal_count == 0 || self.signal_count > g * g {
            return Err(SynthError::Spec(format!(
                "signal count must be in 1..={}, got {}",
                g * g,
                self.signal_count
            )));
        }
        if !(self.signal_shift > 0.0 && self.signal_shift.is_finite()) {
            return Err(SynthError::Spec(format!(
                "signal shift must be positive, got {}",
                self.signal_shift
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SynthError::Spec(format!(
                "noise std must be non-negative, got {}",
                self.noise_std
            )));
        }
        // a checkerboard colour class is the largest independent set
        if self.signal_count > (g * g).div_ceil(2) {
            return Err(SynthError::Infeasible {
                k: self.signal_count,
                g,
            });
        }
        Ok(())
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

/// A generated bag with the indices of its signal tiles.
#[derive(Debug, Clone)]
pub struct SynthBag {
    pub split: Split,
    pub bag: Bag,
    pub signal: Vec<usize>,
}

fn four_neighbors(cell: usize, g: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (cell / g, cell % g);
    let up = (r > 0).then(|| cell - g);
    let down = (r + 1 < g).then(|| cell + g);
    let left = (c > 0).then(|| cell - 1);
    let right = (c + 1 < g).then(|| cell + 1);
    [up, down, left, right].into_iter().flatten()
}

/// Random frontier growth from a uniformly chosen seed tile.
pub fn place_blob<R: Rng>(g: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut in_blob = vec![false; g * g];
    let mut in_frontier = vec![false; g * g];
    let start = rng.gen_range(0..g * g);
    let mut blob = vec![start];
    in_blob[start] = true;
    let mut frontier = Vec::new();
    let mut cell = start;
    while blob.len() < k {
        for nb in four_neighbors(cell, g) {
            if !in_blob[nb] && !in_frontier[nb] {
                in_frontier[nb] = true;
                frontier.push(nb);
            }
        }
        cell = frontier.swap_remove(rng.gen_range(0..frontier.len()));
        in_blob[cell] = true;
        blob.push(cell);
    }
    blob.sort_unstable();
    blob
}

/// Uniform random greedy placement of `k` pairwise non-4-adjacent tiles.
pub fn place_scattered<R: Rng>(g: usize, k: usize, rng: &mut R) -> Result<Vec<usize>, SynthError> {
    for _ in 0..SCATTER_ATTEMPTS {
        let mut blocked = vec![false; g * g];
        let mut chosen = Vec::with_capacity(k);
        let mut order: Vec<usize> = (0..g * g).collect();
        order.shuffle(rng);
        for cell in order {
            if chosen.len() == k {
                break;
            }
            if blocked[cell] {
                continue;
            }
            chosen.push(cell);
            blocked[cell] = true;
            for nb in four_neighbors(cell, g) {
                blocked[nb] = true;
            }
        }
        if chosen.len() == k {
            chosen.sort_unstable();
            return Ok(chosen);
        }
    }
    Err(SynthError::Infeasible { k, g })
}

/// Generates all bags in order train, val, test; classes alternate within a split.
pub fn generate_bags(spec: &SynthSpec) -> Result<Vec<SynthBag>, SynthError> {
    spec.validate()?;
    let g = spec.grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| SynthError::Spec(e.to_string()))?;
    let coords: Vec<Coord> = (0..g * g).map(|c| Coord::new((c / g) as i32, (c % g) as i32)).collect();
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for idx in 0..2 * spec.per_class(split) {
            let label = idx % 2;
            let signal = if label == 1 {
                place_blob(g, spec.signal_count, &mut rng)
            } else {
                place_scattered(g, spec.signal_count, &mut rng)?
            };
            let mut emb = Array2::from_shape_simple_fn((g * g, spec.embed_dim), || noise.sample(&mut rng));
            for &s in &signal {
                emb[[s, 0]] += spec.signal_shift;
            }
            let bag = Bag::new(
                format!("{split}_{idx:05}"),
                coords.clone(),
                emb.mapv(|v| v as f32),
                label,
            )
            .expect("generated bags are valid");
            out.push(SynthBag { split, bag, signal });
        }
    }
    Ok(out)
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset, SynthError> {
    let mut ds = Dataset::empty();
    for sb in generate_bags(spec)? {
        ds.push(sb.split, sb.bag);
    }
    Ok(ds)
}

/// Writes `bags/<id>.psab` files and the manifest under `dir`.
pub fn write_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Dataset, SynthError> {
    let dir = dir.as_ref();
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(io_err(&bag_dir))?;
    let mut entries = Vec::new();
    let mut ds = Dataset::empty();
    for sb in generate_bags(spec)? {
        let rel = PathBuf::from("bags").join(format!("{}.psab", sb.bag.id()));
        let path = dir.join(&rel);
        fs::write(&path, encode_bag(&sb.bag)).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            path: rel,
            label: sb.bag.label(),
            split: sb.split,
        });
        ds.push(sb.split, sb.bag);
    }
    let manifest = dir.join(MANIFEST_NAME);
    fs::write(&manifest, format_manifest(&entries)).map_err(io_err(&manifest))?;
    Ok(ds)
}
