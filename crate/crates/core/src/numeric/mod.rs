//! Deterministic numeric core: tensors, reverse-mode differentiation,
//! small-matrix SVD, rank statistics and the seeded random stream.

pub mod graph;
pub mod rng;
pub mod stats;
pub mod svd;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use rng::{derive_seed, Rng};
pub use stats::spearman;
pub use svd::{svd_small, Svd, SvdError};
pub use tensor::{softmax_rows, Tensor};
