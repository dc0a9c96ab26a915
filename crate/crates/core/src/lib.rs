//! Desk-scale alignment pipeline: supervised fine-tuning with (quantized)
//! low-rank adapters, a pairwise-preference reward model, and KL-penalised
//! PPO on a small character-level decoder-only transformer, plus a word2vec
//! answer-similarity evaluation harness.

pub mod adapt;
pub mod data;
pub mod digest;
pub mod error;
pub mod evalsim;
pub mod jsonl;
pub mod model;
pub mod numcore;
pub mod reward;
pub mod rlhf;
pub mod sft;

pub use error::{Error, Result};
