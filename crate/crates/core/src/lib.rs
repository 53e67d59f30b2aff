//! Recall-expand-filter pipeline for ultra-fine entity typing.
//!
//! The crate is organised by pipeline stage:
//!
//! ```text
//! data / synthetic      mention records, type vocabularies, candidate files
//! tokenizer / embeddings sub-word pieces and type-token registration
//! encoder               miniature transformer, quadrant masks, structured attention
//! recall                MLC scorer (top-K1) and BM25 baseline
//! expand                exact-match and masked-LM prompt expansion
//! filter                MCCE-S / MCCE-B / vanilla cross-encoder
//! eval / bench          macro P/R/F1, recall@K, threshold tuning, throughput
//! pipeline              stage orchestration used by the CLI
//! ```
//!
//! All numerics run in `f64`. Dropout is the only source of randomness inside
//! a forward pass, and every stochastic component takes an explicit seed.

pub mod bench;
pub mod data;
pub mod diagnostics;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod expand;
pub mod filter;
pub mod input;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod recall;
pub mod rng;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
