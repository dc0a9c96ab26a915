//! Answer-similarity evaluation: mean-pooled word2vec embeddings compared
//! by cosine, plus response-length statistics and text tables.

mod word2vec;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use word2vec::{pair_loss, pair_loss_grad, train_word2vec, EmbeddingModel, PairGrad, Word2VecConfig};

use crate::data::{mean_word_count, word_tokens};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPair {
    pub query: String,
    /// Answer written by a real doctor.
    pub reference: String,
    /// Answer from the system under test.
    pub candidate: String,
}

impl QueryPair {
    pub fn validate(&self) -> Result<()> {
        if [&self.query, &self.reference, &self.candidate].iter().any(|s| s.trim().is_empty()) {
            return Err(Error::Contract("query, reference and candidate must all be non-empty".into()));
        }
        Ok(())
    }
}

pub fn load_pairs(path: &Path) -> Result<Vec<QueryPair>> {
    let pairs: Vec<QueryPair> = crate::jsonl::read(path)?;
    for (i, p) in pairs.iter().enumerate() {
        p.validate()
            .map_err(|e| Error::Corpus(format!("{} record {}: {e}", path.display(), i + 1)))?;
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    /// No token of the text was in the vocabulary; the vector is zero.
    pub all_oov: bool,
}

/// Mean of the vectors of in-vocabulary tokens.
pub fn embed_sentence(m: &EmbeddingModel, text: &str) -> SentenceEmbedding {
    let mut sum = vec![0.0; m.dim()];
    let mut n = 0usize;
    for v in word_tokens(text).into_iter().filter_map(|t| m.vector(t)) {
        sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    SentenceEmbedding { vector: sum, all_oov: n == 0 }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// One of the vectors had zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!("cosine of vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(Cosine { value: 0.0, degenerate: true });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(Cosine { value: (dot / (nu * nv)).clamp(-1.0, 1.0), degenerate: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    /// Cosine similarity ×100.
    pub similarity: f64,
    pub reference_oov: bool,
    pub candidate_oov: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Mean of the per-pair similarities, ×100.
    pub mean: f64,
    pub pairs: Vec<PairScore>,
    pub count: usize,
    pub embedding_fingerprint: String,
}

impl SimilarityReport {
    pub fn flagged(&self) -> usize {
        self.pairs.iter().filter(|p| p.reference_oov || p.candidate_oov).count()
    }
}

/// Scores each candidate against its reference answer.
pub fn evaluate_pairs(m: &EmbeddingModel, pairs: &[QueryPair]) -> Result<SimilarityReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("no query pairs to evaluate".into()));
    }
    let scores = pairs
        .iter()
        .map(|p| {
            p.validate()?;
            let r = embed_sentence(m, &p.reference);
            let c = embed_sentence(m, &p.candidate);
            let cos = cosine_similarity(&r.vector, &c.vector)?;
            Ok(PairScore {
                similarity: 100.0 * cos.value,
                reference_oov: r.all_oov,
                candidate_oov: c.all_oov,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().map(|s| s.similarity).sum::<f64>() / scores.len() as f64;
    Ok(SimilarityReport {
        mean,
        count: scores.len(),
        pairs: scores,
        embedding_fingerprint: m.fingerprint(),
    })
}

/// Texts the embedding model is trained on: every reference and candidate.
pub fn embedding_corpus(pairs: &[QueryPair]) -> Vec<&str> {
    pairs.iter().flat_map(|p| [p.reference.as_str(), p.candidate.as_str()]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub system: String,
    pub responses: usize,
    pub mean_words: f64,
}

/// Mean word count per system, counting words as the corpus statistics do.
pub fn length_stats<S: AsRef<str>>(systems: &[(String, Vec<S>)]) -> Vec<LengthRow> {
    systems
        .iter()
        .map(|(name, responses)| LengthRow {
            system: name.clone(),
            responses: responses.len(),
            mean_words: mean_word_count(responses).unwrap_or(0.0),
        })
        .collect()
}

fn render_ranked(header: &str, rows: &[(String, f64)]) -> String {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].1.total_cmp(&rows[a].1));
    let width = rows.iter().map(|r| r.0.chars().count()).chain([6]).max().unwrap_or(6);
    let mut out = format!("{:<4}  {:<width$}  {:>8}\n", "rank", "system", header);
    for (rank, &i) in order.iter().enumerate() {
        let _ = writeln!(out, "{:<4}  {:<width$}  {:>8.2}", rank + 1, rows[i].0, rows[i].1);
    }
    out
}

/// Rows sorted by descending score (ties keep input order), two decimals.
pub fn render_leaderboard(rows: &[(String, f64)]) -> String {
    render_ranked("score", rows)
}

pub fn render_length_table(rows: &[LengthRow]) -> String {
    let pairs: Vec<(String, f64)> = rows.iter().map(|r| (r.system.clone(), r.mean_words)).collect();
    render_ranked("words", &pairs)
}
