//! Desk-scale simulator for explainable personalized federated semi-supervised
//! learning.
//!
//! The pipeline: a tiny ViT masked autoencoder learns from each client's
//! unlabeled images and distills its features into a small CNN classifier
//! trained on the scarce labeled ones. A server aggregates client classifiers
//! with reliability weights, then fuses the global model back into each local
//! model in a cosine-similarity proportion so every client keeps a
//! personalized model. Decision-tree surrogates and t-SNE embeddings explain
//! the local models and the aggregation step, summarized by a scalar
//! explainability score.
//!
//! Everything runs on a from-scratch f64 tensor kernel with reverse-mode
//! autodiff (`numkit`), sized for laptop-minutes experiments where brute-force
//! oracles are still feasible.

pub mod data;
pub mod explain;
pub mod fedcore;
pub mod models;
pub mod numkit;
pub mod quality;

pub use data::{ClientShard, Dataset, PartitionSpec};
pub use fedcore::{ParamVector, RoundConfig, RoundReport, Scheme};
pub use numkit::{GradTape, NodeId, Rng, Tensor};
