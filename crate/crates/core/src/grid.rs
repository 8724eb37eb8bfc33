//! Bags of tiles on an integer grid, tile distances and neighborhood lookup.
//!
//! A bag is one slide: `n` instance embeddings with the integer `(row, col)`
//! position of each tile. Neighborhoods are closed Euclidean balls in tile
//! units, built from a coordinate hash so the cost is proportional to the
//! number of retained pairs rather than `n²`.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rustc_hash::FxHashMap;
use thiserror::Error;

/// Integer tile position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub row: i32,
    pub col: i32,
}

impl Coord {
    pub const fn new(row: i32, col: i32) -> Self {
        Self { row, col }
    }

    pub fn offset(self, dr: i32, dc: i32) -> Self {
        Self::new(self.row + dr, self.col + dc)
    }
}

impl From<(i32, i32)> for Coord {
    fn from((row, col): (i32, i32)) -> Self {
        Self::new(row, col)
    }
}

/// Euclidean distance between two tiles, in tile units.
pub fn pairwise_distance(a: Coord, b: Coord) -> f64 {
    offset_length(i64::from(a.row) - i64::from(b.row), i64::from(a.col) - i64::from(b.col))
}

#[inline]
fn offset_length(dr: i64, dc: i64) -> f64 {
    ((dr * dr + dc * dc) as f64).sqrt()
}

#[derive(Debug, Error)]
pub enum BagError {
    #[error("bag has no instances")]
    Empty,
    #[error("bag has {coords} coordinates but {rows} embedding rows")]
    ShapeMismatch { coords: usize, rows: usize },
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("coords: duplicate tile ({row}, {col}) at instance {index}")]
    DuplicateCoordinate { index: usize, row: i32, col: i32 },
    #[error("embeddings: non-finite value at instance {instance}, feature {feature}")]
    NonFinite { instance: usize, feature: usize },
    #[error("label: {0} does not fit in 16 bits")]
    LabelOverflow(usize),
    #[error("magic: expected \"PSAB\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("version: unsupported bag format version {0}")]
    UnsupportedVersion(u32),
    #[error("reserved: bytes must be zero, found {0:?}")]
    Reserved([u8; 2]),
    #[error("{field}: truncated payload (need {needed} bytes, {available} available)")]
    Truncated {
        field: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("payload: {0} trailing bytes after embeddings")]
    TrailingBytes(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// One slide: instance embeddings, tile coordinates and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    id: String,
    label: usize,
    coords: Vec<Coord>,
    embeddings: Array2<f32>,
}

impl Bag {
    pub fn new(
        id: impl Into<String>,
        coords: Vec<Coord>,
        embeddings: Array2<f32>,
        label: usize,
    ) -> Result<Self, BagError> {
        if coords.is_empty() {
            return Err(BagError::Empty);
        }
        if coords.len() != embeddings.nrows() {
            return Err(BagError::ShapeMismatch {
                coords: coords.len(),
                rows: embeddings.nrows(),
            });
        }
        if embeddings.ncols() == 0 {
            return Err(BagError::ZeroDimension);
        }
        if label > usize::from(u16::MAX) {
            return Err(BagError::LabelOverflow(label));
        }
        let mut seen = FxHashMap::default();
        for (index, &c) in coords.iter().enumerate() {
            if seen.insert(c, index).is_some() {
                return Err(BagError::DuplicateCoordinate {
                    index,
                    row: c.row,
                    col: c.col,
                });
            }
        }
        for ((instance, feature), v) in embeddings.indexed_iter() {
            if !v.is_finite() {
                return Err(BagError::NonFinite { instance, feature });
            }
        }
        Ok(Self {
            id: id.into(),
            label,
            coords,
            embeddings: embeddings.as_standard_layout().into_owned(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    /// Embeddings widened to `f64` for the model.
    pub fn features(&self) -> Array2<f64> {
        self.embeddings.mapv(f64::from)
    }

    /// Same bag with every coordinate shifted by `(dr, dc)`.
    pub fn translated(&self, dr: i32, dc: i32) -> Self {
        Self {
            coords: self.coords.iter().map(|c| c.offset(dr, dc)).collect(),
            ..self.clone()
        }
    }

    /// Same bag with instances reordered so that new instance `k` is old instance `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim();
        let mut emb = Array2::zeros((perm.len(), d));
        for (k, &src) in perm.iter().enumerate() {
            emb.row_mut(k).assign(&self.embeddings.row(src));
        }
        Self {
            id: self.id.clone(),
            label: self.label,
            coords: perm.iter().map(|&src| self.coords[src]).collect(),
            embeddings: emb,
        }
    }

    /// Inclusive `(min, max)` corners of the bag's bounding box.
    pub fn bounds(&self) -> (Coord, Coord) {
        coord_bounds(&self.coords)
    }
}

pub(crate) fn coord_bounds(coords: &[Coord]) -> (Coord, Coord) {
    let mut lo = coords[0];
    let mut hi = coords[0];
    for c in &coords[1..] {
        lo.row = lo.row.min(c.row);
        lo.col = lo.col.min(c.col);
        hi.row = hi.row.max(c.row);
        hi.col = hi.col.max(c.col);
    }
    (lo, hi)
}

/// Per-tile neighbor lists in compressed row form.
///
/// Row `i` holds the sorted indices of the tiles attended by tile `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodIndex {
    radius: f64,
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl NeighborhoodIndex {
    /// Builds an index from explicit rows. Each row is sorted.
    pub fn from_rows(radius: f64, rows: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        offsets.push(0);
        for mut row in rows {
            row.sort_unstable();
            indices.extend_from_slice(&row);
            offsets.push(indices.len());
        }
        Self {
            radius,
            offsets,
            indices,
        }
    }

    /// Every tile attends to every tile.
    pub fn full(n: usize) -> Self {
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(n * n);
        offsets.push(0);
        for _ in 0..n {
            indices.extend(0..n);
            offsets.push(indices.len());
        }
        Self {
            radius: f64::INFINITY,
            offsets,
            indices,
        }
    }

    /// Radius the index was built with, in tile units.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub(crate) fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Total number of `(i, j)` pairs, i.e. `Σ_i |N(i)|`.
    pub fn pair_count(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }
}

/// Hash lookup from tile position to instance index.
pub struct CoordLookup {
    map: FxHashMap<Coord, usize>,
    lo: Coord,
    hi: Coord,
}

impl CoordLookup {
    pub fn new(coords: &[Coord]) -> Self {
        let mut map = FxHashMap::default();
        map.reserve(coords.len());
        for (i, &c) in coords.iter().enumerate() {
            map.insert(c, i);
        }
        let (lo, hi) = coord_bounds(coords);
        Self { map, lo, hi }
    }

    pub fn get(&self, c: Coord) -> Option<usize> {
        self.map.get(&c).copied()
    }

    /// Largest offset that can still land inside the bag's bounding box.
    fn max_reach(&self) -> i64 {
        let rows = i64::from(self.hi.row) - i64::from(self.lo.row);
        let cols = i64::from(self.hi.col) - i64::from(self.lo.col);
        rows.max(cols)
    }

    fn collect_rows(&self, coords: &[Coord], offsets: &[(i32, i32)], radius: f64) -> NeighborhoodIndex {
        let rows = coords
            .iter()
            .map(|&c| {
                offsets
                    .iter()
                    .filter_map(|&(dr, dc)| self.get(c.offset(dr, dc)))
                    .collect()
            })
            .collect();
        NeighborhoodIndex::from_rows(radius, rows)
    }
}

/// Offsets `(dr, dc)` inside the `(2⌈radius⌉+1)²` box with length `≤ radius`,
/// clipped to `reach` in each direction.
fn ball_offsets(radius: f64, reach: i64) -> Vec<(i32, i32)> {
    let box_reach = if radius.is_finite() {
        (radius.ceil() as i64).min(reach)
    } else {
        reach
    };
    let mut out = Vec::new();
    for dr in -box_reach..=box_reach {
        for dc in -box_reach..=box_reach {
            if offset_length(dr, dc) <= radius {
                out.push((dr as i32, dc as i32));
            }
        }
    }
    out
}

/// Closed-ball neighborhoods `N(i) = { j : d_ij ≤ radius }`.
///
/// Each tile probes the offsets of its bounding box through a coordinate
/// hash, so the work is `O(n · (2⌈r⌉+1)²)` independent of `n²`.
pub fn neighborhood_index(coords: &[Coord], radius: f64) -> NeighborhoodIndex {
    assert!(radius >= 0.0, "radius must be non-negative, got {radius}");
    if coords.is_empty() {
        return NeighborhoodIndex::from_rows(radius, Vec::new());
    }
    let lookup = CoordLookup::new(coords);
    let offsets = ball_offsets(radius, lookup.max_reach());
    lookup.collect_rows(coords, &offsets, radius)
}

/// Chebyshev neighborhoods: every tile within `k` rows and `k` columns.
pub fn chebyshev_index(coords: &[Coord], k: u32) -> NeighborhoodIndex {
    if coords.is_empty() {
        return NeighborhoodIndex::from_rows(f64::from(k), Vec::new());
    }
    let lookup = CoordLookup::new(coords);
    let reach = i64::from(k).min(lookup.max_reach()) as i32;
    let offsets: Vec<(i32, i32)> = (-reach..=reach)
        .flat_map(|dr| (-reach..=reach).map(move |dc| (dr, dc)))
        .collect();
    lookup.collect_rows(coords, &offsets, f64::from(k))
}

const MAGIC: &[u8; 4] = b"PSAB";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 2 + 2;

/// Serializes a bag to the little-endian `PSAB` v1 layout.
pub fn encode_bag(bag: &Bag) -> Vec<u8> {
    let n = bag.len();
    let d = bag.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * 8 + n * d * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(bag.label as u16).to_le_bytes());
    buf.extend_from_slice(&[0, 0]);
    for c in &bag.coords {
        buf.extend_from_slice(&c.row.to_le_bytes());
        buf.extend_from_slice(&c.col.to_le_bytes());
    }
    for v in bag.embeddings.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, field: &'static str) -> Result<&'a [u8], BagError> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(BagError::Truncated {
                field,
                needed: len,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, BagError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Parses a `PSAB` v1 byte buffer.
pub fn decode_bag(id: impl Into<String>, bytes: &[u8]) -> Result<Bag, BagError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(BagError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(BagError::UnsupportedVersion(version));
    }
    let n = r.u32("n")? as usize;
    let d = r.u32("d")? as usize;
    let label = u16::from_le_bytes(r.take(2, "label")?.try_into().unwrap());
    let reserved: [u8; 2] = r.take(2, "reserved")?.try_into().unwrap();
    if reserved != [0, 0] {
        return Err(BagError::Reserved(reserved));
    }
    let coord_bytes = r.take(n.checked_mul(8).ok_or(BagError::Empty)?, "coords")?;
    let coords = coord_bytes
        .chunks_exact(8)
        .map(|c| {
            Coord::new(
                i32::from_le_bytes(c[0..4].try_into().unwrap()),
                i32::from_le_bytes(c[4..8].try_into().unwrap()),
            )
        })
        .collect();
    let emb_len = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or(BagError::Truncated {
            field: "embeddings",
            needed: usize::MAX,
            available: bytes.len() - r.pos,
        })?;
    let emb_bytes = r.take(emb_len, "embeddings")?;
    if r.pos != bytes.len() {
        return Err(BagError::TrailingBytes(bytes.len() - r.pos));
    }
    let values: Vec<f32> = emb_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let embeddings = Array2::from_shape_vec((n, d), values).expect("length checked above");
    Bag::new(id, coords, embeddings, usize::from(label))
}

pub fn save_bag(bag: &Bag, path: impl AsRef<Path>) -> Result<(), BagError> {
    let path = path.as_ref();
    if bag.label > usize::from(u16::MAX) {
        return Err(BagError::LabelOverflow(bag.label));
    }
    fs::write(path, encode_bag(bag)).map_err(|source| BagError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Loads a bag; its id is the file stem.
pub fn load_bag(path: impl AsRef<Path>) -> Result<Bag, BagError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| BagError::Io {
        path: path.to_owned(),
        source,
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_bag(id, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("manifest line {line}: label {manifest} disagrees with bag file label {file}")]
    LabelMismatch { line: usize, manifest: usize, file: usize },
    #[error("bag {path}: {source}")]
    Bag {
        path: PathBuf,
        #[source]
        source: BagError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.label, e.split));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut entries = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |message: String| DatasetError::Manifest { line: line_no, message };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let label = fields[1]
            .parse()
            .map_err(|e| err(format!("bad label {:?}: {e}", fields[1])))?;
        let split = fields[2].parse().map_err(err)?;
        entries.push(ManifestEntry {
            path: PathBuf::from(fields[0]),
            label,
            split,
        });
    }
    Ok(entries)
}

/// A directory of bag files described by a manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Bag] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn push(&mut self, split: Split, bag: Bag) {
        match split {
            Split::Train => self.train.push(bag),
            Split::Val => self.val.push(bag),
            Split::Test => self.test.push(bag),
        }
    }

    pub fn empty() -> Self {
        Self {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|source| DatasetError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let mut ds = Dataset::empty();
    for (k, entry) in parse_manifest(&text)?.into_iter().enumerate() {
        let path = dir.join(&entry.path);
        let bag = load_bag(&path).map_err(|source| DatasetError::Bag {
            path: path.clone(),
            source,
        })?;
        if bag.label() != entry.label {
            return Err(DatasetError::LabelMismatch {
                line: k + 1,
                manifest: entry.label,
                file: bag.label(),
            });
        }
        ds.push(entry.split, bag);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn full_grid(side: i32) -> Vec<Coord> {
        (0..side)
            .flat_map(|r| (0..side).map(move |c| Coord::new(r, c)))
            .collect()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(pairwise_distance(Coord::new(0, 0), Coord::new(3, 4)), 5.0);
        assert_eq!(pairwise_distance(Coord::new(7, 2), Coord::new(7, 2)), 0.0);
        let diag = pairwise_distance(Coord::new(1, 0), Coord::new(0, 1));
        assert!((diag - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn neighborhood_examples_on_3x3() {
        let coords = full_grid(3);
        let center = 4;
        let n1 = neighborhood_index(&coords, 1.0);
        assert_eq!(n1.neighbors(center), &[1, 3, 4, 5, 7]);
        let n15 = neighborhood_index(&coords, 1.5);
        assert_eq!(n15.neighbors(center), &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
        let n0 = neighborhood_index(&coords, 0.0);
        for i in 0..coords.len() {
            assert_eq!(n0.neighbors(i), &[i]);
        }
    }

    #[test]
    fn huge_radius_is_clipped_to_bag_extent() {
        let coords = vec![Coord::new(0, 0), Coord::new(0, 5), Coord::new(100, 100)];
        let idx = neighborhood_index(&coords, f64::INFINITY);
        for i in 0..3 {
            assert_eq!(idx.neighbors(i), &[0, 1, 2]);
        }
    }

    #[test]
    fn chebyshev_zero_is_self_only() {
        let coords = full_grid(4);
        let idx = chebyshev_index(&coords, 0);
        assert_eq!(idx.pair_count(), 16);
        let idx1 = chebyshev_index(&coords, 1);
        assert_eq!(idx1.neighbors(5).len(), 9);
        assert_eq!(idx1.neighbors(0).len(), 4);
    }

    #[test]
    fn bag_validation_errors() {
        let emb = Array2::<f32>::zeros((2, 3));
        let dup = vec![Coord::new(1, 1), Coord::new(1, 1)];
        assert!(matches!(
            Bag::new("x", dup, emb.clone(), 0),
            Err(BagError::DuplicateCoordinate { index: 1, .. })
        ));
        let mut bad = emb.clone();
        bad[[1, 2]] = f32::NAN;
        assert!(matches!(
            Bag::new("x", vec![Coord::new(0, 0), Coord::new(0, 1)], bad, 0),
            Err(BagError::NonFinite {
                instance: 1,
                feature: 2
            })
        ));
        assert!(matches!(
            Bag::new("x", vec![], Array2::<f32>::zeros((0, 3)), 0),
            Err(BagError::Empty)
        ));
    }

    #[test]
    fn small_bag_round_trips_exactly() {
        let bag = Bag::new("b", vec![Coord::new(-3, 9)], array![[0.5f32, -0.25]], 1).unwrap();
        let back = decode_bag("b", &encode_bag(&bag)).unwrap();
        assert_eq!(back, bag);
        assert_eq!(back.embeddings()[[0, 0]].to_bits(), 0.5f32.to_bits());
        assert_eq!(back.embeddings()[[0, 1]].to_bits(), (-0.25f32).to_bits());
    }

    #[test]
    fn decode_errors_name_their_field() {
        let bag = Bag::new(
            "b",
            vec![Coord::new(0, 0), Coord::new(0, 1)],
            array![[1.0f32], [2.0]],
            3,
        )
        .unwrap();
        let good = encode_bag(&bag);

        let mut magic = good.clone();
        magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_bag("b", &magic), Err(BagError::BadMagic(m)) if &m == b"XXXX"));

        let mut version = good.clone();
        version[4] = 2;
        assert!(matches!(
            decode_bag("b", &version),
            Err(BagError::UnsupportedVersion(2))
        ));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            decode_bag("b", truncated),
            Err(BagError::Truncated {
                field: "embeddings",
                ..
            })
        ));
        assert!(matches!(
            decode_bag("b", &good[..HEADER_LEN + 3]),
            Err(BagError::Truncated { field: "coords", .. })
        ));
        assert!(matches!(
            decode_bag("b", &good[..6]),
            Err(BagError::Truncated { field: "version", .. })
        ));

        let mut dup = good.clone();
        dup[HEADER_LEN + 8..HEADER_LEN + 16].copy_from_slice(&[0; 8]);
        assert!(matches!(
            decode_bag("b", &dup),
            Err(BagError::DuplicateCoordinate { .. })
        ));

        let mut nan = good.clone();
        let at = HEADER_LEN + 16;
        nan[at..at + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_bag("b", &nan), Err(BagError::NonFinite { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_bag("b", &trailing), Err(BagError::TrailingBytes(1))));
    }

    #[test]
    fn header_layout_is_fixed() {
        let bag = Bag::new("b", vec![Coord::new(2, -1)], array![[1.0f32, 2.0]], 7).unwrap();
        let bytes = encode_bag(&bag);
        assert_eq!(&bytes[..4], b"PSAB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..18], &7u16.to_le_bytes());
        assert_eq!(&bytes[18..20], &[0, 0]);
        assert_eq!(&bytes[20..24], &2i32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-1i32).to_le_bytes());
        assert_eq!(bytes.len(), 20 + 8 + 8);
    }

    #[test]
    fn manifest_parse_and_format() {
        let text = "bags/a.psab\t1\ttrain\nbags/b.psab\t0\ttest\n";
        let entries = parse_manifest(text).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].split, Split::Test);
        assert_eq!(format_manifest(&entries), text);
        assert!(parse_manifest("a\t1\tholdout\n").is_err());
        assert!(parse_manifest("a\t1\n").is_err());
    }
}
