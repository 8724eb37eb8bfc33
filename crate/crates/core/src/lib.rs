//! Probabilistic spatial attention for multiple instance learning.
//!
//! Tiles of a slide form a bag of instance embeddings on an integer grid.
//! Each attention head treats its softmax weights as posterior
//! responsibilities under a learnable distance-decay prior, and prunes every
//! key whose prior falls below a threshold, so its cost scales with the
//! learned neighborhood size instead of the bag size squared.

pub mod attention;
pub mod bench;
pub mod cli;
pub mod decay;
pub mod grid;
pub mod heatmap;
pub mod objective;
pub mod synth;
pub mod train;
