//! Topic-aware question paraphrase identification.
//!
//! End-to-end desk-scale pipeline: LDA topic inference by collapsed Gibbs
//! sampling, early/late fusion of topic distributions with word
//! embeddings, Siamese BiLSTM encoding, cosine affinity matrices, CNN
//! aggregation, and a training/evaluation/ablation harness. All numerics
//! run on a from-scratch f64 reverse-mode autodiff core.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encode;
pub mod error;
pub mod evaluate;
pub mod lda;
pub mod matching;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Result, TapaError};
