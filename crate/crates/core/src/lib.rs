//! Hierarchical vision transformers with graph-convolutional positional
//! embeddings, trained on a small reverse-mode autodiff engine.
//!
//! Module map: [`tensor`] (autodiff), [`graph`] (grid adjacency and GCN
//! embedding), [`nn`] (attention and encoder layers), [`model`] (the five
//! variants), [`data`] (IDX loading and batching), [`train`] (Adam,
//! evaluation, checkpoints) and [`gradcheck`] (finite-difference suite).

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_variant, DatasetDims, ModelConfig, ParamSet, Variant};
pub use tensor::Tensor;
