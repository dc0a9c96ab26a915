#![allow(dead_code)]

use ivy_core::model::{DecoderModel, ModelConfig};
use ivy_core::numcore::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab: usize, ctx: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        context_length: ctx,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        seed,
    }
}

pub fn tiny_model<T: Scalar>(vocab: usize, ctx: usize, seed: u64) -> DecoderModel<T> {
    DecoderModel::new(tiny_config(vocab, ctx, seed)).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
