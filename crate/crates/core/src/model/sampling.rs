use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::DecoderModel;
use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Generation stops after emitting this id.
    pub eos: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: 40,
            temperature: 1.0,
            max_new_tokens: 128,
            seed: 0,
            eos: Some(super::vocab::EOS),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Log-probability of each emitted token under the truncated,
    /// renormalised distribution it was drawn from.
    pub logprobs: Vec<f64>,
}

/// Ids of the `k` largest logits, ties broken toward the smaller id.
fn top_k_ids(logits: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Renormalised distribution over the kept ids at the given temperature.
pub fn truncated_distribution(logits: &[f64], top_k: usize, temperature: f64) -> Vec<(usize, f64)> {
    let ids = top_k_ids(logits, top_k.min(logits.len()));
    let max = logits[ids[0]];
    let weights: Vec<f64> = ids
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    ids.into_iter().zip(weights).map(|(i, w)| (i, w / z)).collect()
}

/// Samples a continuation of `prompt` one token at a time. When the running
/// sequence outgrows the context, only the most recent tokens are fed.
pub fn generate<T: Scalar>(
    model: &DecoderModel<T>,
    prompt: &[usize],
    cfg: &SamplerConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let ctx = model.config().context_length;
    if prompt.is_empty() {
        return Err(Error::Contract("generation needs a non-empty prompt".into()));
    }
    if prompt.len() > ctx {
        return Err(Error::ContextLength {
            len: prompt.len(),
            max: ctx,
        });
    }
    let vocab = model.config().vocab_size;
    let top_k = if cfg.top_k > vocab {
        log::warn!("top_k {} exceeds vocabulary size {vocab}; clamped", cfg.top_k);
        vocab
    } else {
        cfg.top_k
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let mark = tape.len();
    let mut seq = prompt.to_vec();
    let mut out = Generation {
        tokens: Vec::new(),
        logprobs: Vec::new(),
    };
    for _ in 0..cfg.max_new_tokens {
        let window = &seq[seq.len().saturating_sub(ctx)..];
        let hidden = model.hidden_tape(&mut tape, &bound, window)?;
        let last = tape.gather_rows(hidden, &[window.len() - 1])?;
        let logits = model.logits_tape(&mut tape, &bound, last)?;
        let row: Vec<f64> = tape.value(logits).iter().map(|v| v.as_f64()).collect();
        tape.truncate(mark);

        let dist = truncated_distribution(&row, top_k, cfg.temperature);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = dist[dist.len() - 1];
        for &(id, p) in &dist {
            acc += p;
            if u < acc {
                pick = (id, p);
                break;
            }
        }
        seq.push(pick.0);
        out.tokens.push(pick.0);
        out.logprobs.push(pick.1.ln());
        if cfg.eos == Some(pick.0) {
            break;
        }
    }
    Ok(out)
}

/// Log-probabilities of each `response` token given everything before it,
/// under the full softmax. Returns the total and the per-token terms.
pub fn sequence_logprob<T: Scalar>(
    model: &DecoderModel<T>,
    prompt: &[usize],
    response: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if response.is_empty() {
        return Err(Error::Contract("log-probability of an empty response".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("log-probability needs a non-empty prompt".into()));
    }
    let full: Vec<usize> = prompt.iter().chain(response).copied().collect();
    let input = &full[..full.len() - 1];
    let logits = model.forward(input)?;
    let v = model.config().vocab_size;
    let per: Vec<f64> = response
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            let pos = prompt.len() - 1 + i;
            let row: Vec<f64> = logits.data()[pos * v..(pos + 1) * v]
                .iter()
                .map(|x| x.as_f64())
                .collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row[tok] - lse
        })
        .collect();
    Ok((per.iter().sum(), per))
}
