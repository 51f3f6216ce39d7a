//! Dual-branch multiple-instance-learning over precomputed patch embeddings.
//!
//! A whole-slide image is represented by `N` patch embeddings. A concept
//! prior (cosine similarities between patches and concept text embeddings)
//! gives a second, inherently interpretable view of the same slide. The two
//! views are aggregated by a deep-encoding branch and a concept-encoding
//! branch, aligned by a symmetric contrastive objective, and evaluated with
//! zero-label heuristics, linear probes, and concept-ranking reports.
//!
//! The crate is `no_std` (with `alloc`): it contains only the math — tensors
//! with reverse-mode gradients, the two branches, losses, the training loop,
//! evaluation metrics, and a synthetic data generator. File formats and the
//! command-line surface live in the companion `gecko-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod concept;
pub mod deep;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod pretrain;
pub mod prior;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
