//! Clustering-based unsupervised re-identification over generic feature
//! vectors: stochastic cluster memory, temporal-ensembling instance memory,
//! camera-aware unified distance clustering and memory-based contrastive
//! training, with retrieval evaluation and ablation harnesses.

pub mod cli;
pub mod clustering;
pub mod dataset;
pub mod distance;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod loss;
pub mod memory;
pub mod numerics;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
