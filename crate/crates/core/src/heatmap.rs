//! Grayscale heatmaps of per-instance scores over a bag's bounding grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::attention::ModelOutput;
use crate::grid::Bag;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("expected {expected} scores, got {found}")]
    Length { expected: usize, found: usize },
    #[error("score {index} is {value}; scores must be finite and non-negative")]
    BadScore { index: usize, value: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn check(bag: &Bag, scores: &[f64]) -> Result<(), HeatmapError> {
    if scores.len() != bag.len() {
        return Err(HeatmapError::Length {
            expected: bag.len(),
            found: scores.len(),
        });
    }
    for (index, &value) in scores.iter().enumerate() {
        if !(value.is_finite() && value >= 0.0) {
            return Err(HeatmapError::BadScore { index, value });
        }
    }
    Ok(())
}

/// Pixel values `round(255·s/max s)` over the bounding grid, row-major;
/// tiles absent from the bag are 0.
pub fn heatmap_pixels(bag: &Bag, scores: &[f64]) -> Result<(usize, usize, Vec<u8>), HeatmapError> {
    check(bag, scores)?;
    let (lo, hi) = bag.bounds();
    let width = (hi.col - lo.col) as usize + 1;
    let height = (hi.row - lo.row) as usize + 1;
    let max = scores.iter().cloned().fold(0.0, f64::max);
    let mut pixels = vec![0u8; width * height];
    for (c, &s) in bag.coords().iter().zip(scores) {
        let v = if max > 0.0 {
            (255.0 * s / max + 0.5).floor()
        } else {
            0.0
        };
        pixels[(c.row - lo.row) as usize * width + (c.col - lo.col) as usize] = v as u8;
    }
    Ok((width, height, pixels))
}

/// ASCII PGM (`P2`) rendering.
pub fn render_pgm(bag: &Bag, scores: &[f64]) -> Result<String, HeatmapError> {
    let (width, height, pixels) = heatmap_pixels(bag, scores)?;
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn render_csv(bag: &Bag, scores: &[f64]) -> Result<String, HeatmapError> {
    check(bag, scores)?;
    let mut out = String::from("row,col,score\n");
    for (c, s) in bag.coords().iter().zip(scores) {
        let _ = writeln!(out, "{},{},{}", c.row, c.col, s);
    }
    Ok(out)
}

/// Writes `path` as PGM and a `.csv` twin next to it.
pub fn export_heatmap(bag: &Bag, scores: &[f64], path: impl AsRef<Path>) -> Result<(), HeatmapError> {
    let path = path.as_ref();
    let pgm = render_pgm(bag, scores)?;
    let csv = render_csv(bag, scores)?;
    let csv_path = path.with_extension("csv");
    for (p, text) in [(path, pgm), (csv_path.as_path(), csv)] {
        fs::write(p, text).map_err(|source| HeatmapError::Io {
            path: p.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Instance with the largest pooling score and each head's attention row
/// from that instance, as dense per-instance scores.
pub fn anchor_head_maps(out: &ModelOutput) -> (usize, Vec<Vec<f64>>) {
    let scores = &out.pool.scores;
    let anchor = (0..scores.len()).fold(0, |best, i| if scores[i] > scores[best] { i } else { best });
    let maps = out
        .heads
        .iter()
        .map(|h| {
            let mut dense = vec![0.0; scores.len()];
            let (cols, w) = h.posterior.row(anchor);
            for (&j, &v) in cols.iter().zip(w) {
                dense[j] = v;
            }
            dense
        })
        .collect();
    (anchor, maps)
}
