//! Label-graph semantic embeddings plus cross-modality attention for
//! multi-label image and video classification, built on a small
//! double-precision tensor core with reverse-mode differentiation.
//!
//! The crate is organized as:
//! - [`tensor`], [`graph`], [`nn`], [`gradcheck`], [`rng`]: numerical core.
//! - [`label_graph`]: co-occurrence statistics and the conditional-probability
//!   adjacency matrix.
//! - [`asge`]: label embeddings trained so pairwise cosine similarities match
//!   the symmetrized adjacency.
//! - [`backbone`]: toy convolutional image backbone and the temporal
//!   squeezing network for video features.
//! - [`cma`]: per-category cosine attention, aggregation, classification,
//!   multi-scale fusion, and the self-attention baseline.
//! - [`metrics`]: training loss weights and the evaluation suite
//!   (mAP, per-class/overall P/R/F1, GAP, PERR, Hit@1).
//! - [`synth`], [`config`], [`pipeline`]: synthetic planted-signal datasets,
//!   run configuration, and train/eval/export orchestration.

pub mod asge;
pub mod backbone;
pub mod cma;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod label_graph;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use nn::{Mode, NormKind, ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use tensor::Tensor;
