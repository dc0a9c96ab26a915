//! Skip-gram word2vec with negative sampling, in f64.

use std::collections::{BTreeMap, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::word_tokens;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Word2VecConfig {
    pub dim: usize,
    /// Maximum distance between a centre word and a context word.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly to 1e-4 of itself.
    pub lr: f64,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for Word2VecConfig {
    fn default() -> Self {
        Word2VecConfig {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            min_count: 1,
            seed: 0,
        }
    }
}

impl Word2VecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.epochs == 0 || self.min_count == 0 {
            return Err(Error::Config("dim, window, epochs and min_count must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Trained input vectors, one row per vocabulary token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    pub config: Word2VecConfig,
    tokens: Vec<String>,
    vectors: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl EmbeddingModel {
    /// Builds a model from explicit vectors, e.g. for fixtures.
    pub fn from_vectors(config: Word2VecConfig, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut tokens = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * config.dim);
        for (t, v) in entries {
            if v.len() != config.dim {
                return Err(Error::Dimension(format!("vector for {t:?} has {} entries, expected {}", v.len(), config.dim)));
            }
            tokens.push(t);
            vectors.extend(v);
        }
        let mut m = EmbeddingModel { config, tokens, vectors, index: HashMap::new() };
        m.reindex()?;
        Ok(m)
    }

    fn reindex(&mut self) -> Result<()> {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if self.index.len() != self.tokens.len() {
            return Err(Error::Contract("duplicate token in embedding vocabulary".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        let d = self.config.dim;
        self.index.get(token).map(|&i| &self.vectors[i * d..(i + 1) * d])
    }

    /// SHA-256 over the configuration, tokens and vector bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        for v in &self.vectors {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: EmbeddingModel = serde_json::from_str(&text)?;
        if m.vectors.len() != m.tokens.len() * m.config.dim {
            return Err(Error::Corruption(format!("{}: vector table has the wrong size", path.display())));
        }
        m.reindex()?;
        Ok(m)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x.abs()).exp().ln_1p() + (-x).max(0.0))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of [`pair_loss`] with respect to each of its vector arguments.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub center: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// `−log σ(u_pos·v) − Σ log σ(−u_neg·v)` for centre input vector `v`.
pub fn pair_loss(center: &[f64], positive: &[f64], negatives: &[&[f64]]) -> f64 {
    -log_sigmoid(dot(positive, center)) - negatives.iter().map(|n| log_sigmoid(-dot(n, center))).sum::<f64>()
}

pub fn pair_loss_grad(center: &[f64], positive: &[f64], negatives: &[&[f64]]) -> (f64, PairGrad) {
    let d = center.len();
    let mut g_center = vec![0.0; d];
    let mut term = |u: &[f64], label: f64| -> Vec<f64> {
        // d/dx of −log σ(±x) is σ(x) − label.
        let coef = sigmoid(dot(u, center)) - label;
        for (g, ui) in g_center.iter_mut().zip(u) {
            *g += coef * ui;
        }
        center.iter().map(|c| coef * c).collect()
    };
    let g_pos = term(positive, 1.0);
    let g_neg: Vec<Vec<f64>> = negatives.iter().map(|n| term(n, 0.0)).collect();
    let loss = pair_loss(center, positive, negatives);
    (loss, PairGrad { center: g_center, positive: g_pos, negatives: g_neg })
}

/// Trains skip-gram with negative sampling on the tokenised `texts`, using
/// a dynamic window and the unigram^0.75 noise distribution.
pub fn train_word2vec<S: AsRef<str>>(texts: &[S], cfg: &Word2VecConfig) -> Result<EmbeddingModel> {
    cfg.validate()?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in texts {
        for w in word_tokens(t.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts.retain(|_, c| *c >= cfg.min_count);
    if counts.len() < 2 {
        return Err(Error::Training(format!(
            "word2vec needs at least 2 distinct tokens, found {}",
            counts.len()
        )));
    }
    let mut vocab: Vec<(&str, usize)> = counts.into_iter().collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let ids: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, (w, _))| (*w, i)).collect();
    let sentences: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| word_tokens(t.as_ref()).into_iter().filter_map(|w| ids.get(w).copied()).collect())
        .collect();

    let (v, d) = (vocab.len(), cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..v * d).map(|_| (rng.random::<f64>() - 0.5) / d as f64).collect();
    let mut output = vec![0.0; v * d];
    let noise = WeightedIndex::new(vocab.iter().map(|(_, c)| (*c as f64).powf(0.75)))
        .map_err(|e| Error::Training(format!("noise distribution: {e}")))?;

    let total = (cfg.epochs * sentences.iter().map(Vec::len).sum::<usize>()).max(1) as f64;
    let mut seen = 0usize;
    for _ in 0..cfg.epochs {
        for s in &sentences {
            for pos in 0..s.len() {
                let lr = cfg.lr * (1.0 - seen as f64 / total).max(1e-4);
                seen += 1;
                let reach = cfg.window - rng.random_range(0..cfg.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(s.len() - 1);
                for ctx in lo..=hi {
                    if ctx == pos {
                        continue;
                    }
                    let (c, o) = (s[pos], s[ctx]);
                    let negs: Vec<usize> = (0..cfg.negatives)
                        .map(|_| noise.sample(&mut rng))
                        .filter(|&n| n != o)
                        .collect();
                    let center = input[c * d..(c + 1) * d].to_vec();
                    let neg_vecs: Vec<&[f64]> = negs.iter().map(|&n| &output[n * d..(n + 1) * d]).collect();
                    let (_, g) = pair_loss_grad(&center, &output[o * d..(o + 1) * d], &neg_vecs);
                    for (w, gi) in output[o * d..(o + 1) * d].iter_mut().zip(&g.positive) {
                        *w -= lr * gi;
                    }
                    for (&n, gn) in negs.iter().zip(&g.negatives) {
                        for (w, gi) in output[n * d..(n + 1) * d].iter_mut().zip(gn) {
                            *w -= lr * gi;
                        }
                    }
                    for (w, gi) in input[c * d..(c + 1) * d].iter_mut().zip(&g.center) {
                        *w -= lr * gi;
                    }
                }
            }
        }
    }
    let mut m = EmbeddingModel {
        config: cfg.clone(),
        tokens: vocab.iter().map(|(w, _)| w.to_string()).collect(),
        vectors: input,
        index: HashMap::new(),
    };
    m.reindex()?;
    Ok(m)
}
