//! Contrastive pre-training of text and code embeddings at desk scale.

pub mod ablation;
pub mod config;
pub mod container;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod index;
pub mod miner;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
