//! Pairwise-preference reward model: the fine-tuned backbone plus a scalar
//! head read at the final token.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fit_prompt_response, split_train_val};
use crate::error::{Error, Result};
use crate::model::{Bound, DecoderModel, PolicyCheckpoint, Vocabulary};
use crate::numcore::{AdamWConfig, AdamWState, Tape, Var};

pub mod synthetic;

pub const REWARD_HEAD: &str = "reward";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Ui,
    File,
    Synthetic,
}

/// One human (or programmatic) judgement that `chosen` beats `rejected`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub annotator: String,
    /// Unix seconds.
    pub ts: u64,
    pub origin: Origin,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::Contract("preference with an empty prompt".into()));
        }
        if self.chosen == self.rejected {
            return Err(Error::Contract("preference whose chosen and rejected responses are equal".into()));
        }
        Ok(())
    }
}

/// Reads a preference file, rejecting the whole file on the first invalid
/// record.
pub fn load_preferences(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let records: Vec<PreferenceRecord> = crate::jsonl::read(path)?;
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| Error::Corpus(format!("{} record {}: {e}", path.display(), i + 1)))?;
    }
    Ok(records)
}

/// `−log σ(r_chosen − r_rejected)`, evaluated without overflow.
pub fn pairwise_loss(r_chosen: f64, r_rejected: f64) -> f64 {
    let m = r_chosen - r_rejected;
    (-m).max(0.0) + (-m.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of records held out for accuracy.
    pub holdout_fraction: f64,
    /// Train the policy's adapters (plus the head) instead of the full
    /// backbone.
    pub use_adapters: bool,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 3,
            seed: 0,
            holdout_fraction: 0.2,
            use_adapters: false,
        }
    }
}

impl RmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("reward learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("reward batch size and epochs must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub model: DecoderModel<f32>,
    pub vocab: Vocabulary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    /// Position in the input list.
    pub index: usize,
    pub response: String,
    pub score: f64,
}

impl RewardModel {
    /// Copies the policy backbone and adds a freshly initialised reward
    /// head. Without `use_adapters` the adapters are merged and every
    /// weight becomes trainable.
    pub fn from_policy(policy: &PolicyCheckpoint, use_adapters: bool, seed: u64) -> Result<Self> {
        let mut model = policy.model.clone();
        if !use_adapters || model.adapters().is_empty() {
            model.merge_adapters()?;
            for name in model.params().keys().cloned().collect::<Vec<_>>() {
                model.set_trainable(&name, true)?;
            }
        }
        model.add_head(REWARD_HEAD, seed);
        Ok(RewardModel { model, vocab: policy.vocab.clone() })
    }

    pub fn from_checkpoint(ck: PolicyCheckpoint) -> Result<Self> {
        if !ck.model.has_head(REWARD_HEAD) {
            return Err(Error::Config("checkpoint has no reward head".into()));
        }
        Ok(RewardModel { model: ck.model, vocab: ck.vocab })
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        let mut ck = PolicyCheckpoint::new(self.model.clone(), self.vocab.clone());
        ck.metadata.insert("stage".into(), "reward".into());
        ck
    }

    /// Prompt-plus-response token ids, fitted to the context.
    pub fn encode(&self, prompt: &str, response: &str) -> Result<Vec<usize>> {
        if response.trim().is_empty() {
            return Err(Error::Contract("cannot score an empty response".into()));
        }
        let p = self.vocab.encode_prompt(prompt);
        let r = self.vocab.encode_response(response);
        Ok(fit_prompt_response(&p, &r, self.model.config().context_length)?.0)
    }

    fn score_var(&self, tape: &mut Tape<f32>, b: &Bound, tokens: &[usize]) -> Result<Var> {
        let h = self.model.hidden_tape(tape, b, tokens)?;
        let last = tape.gather_rows(h, &[tokens.len() - 1])?;
        self.model.head_tape(tape, b, REWARD_HEAD, last)
    }

    pub fn score_tokens(&self, tokens: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.model.bind(&mut tape)?;
        let s = self.score_var(&mut tape, &b, tokens)?;
        Ok(tape.scalar_value(s) as f64)
    }

    pub fn score(&self, prompt: &str, response: &str) -> Result<f64> {
        self.score_tokens(&self.encode(prompt, response)?)
    }

    /// Responses by descending score; ties keep input order.
    pub fn rank_responses<S: AsRef<str>>(&self, prompt: &str, responses: &[S]) -> Result<Vec<Ranked>> {
        let mut out = responses
            .iter()
            .enumerate()
            .map(|(index, r)| {
                Ok(Ranked {
                    index,
                    response: r.as_ref().to_string(),
                    score: self.score(prompt, r.as_ref())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        Ok(out)
    }

    /// Fraction of records whose chosen response outscores the rejected one.
    pub fn pairwise_accuracy(&self, records: &[PreferenceRecord]) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::Contract("accuracy over no records".into()));
        }
        let mut hits = 0usize;
        for r in records {
            if self.score(&r.prompt, &r.chosen)? > self.score(&r.prompt, &r.rejected)? {
                hits += 1;
            }
        }
        Ok(hits as f64 / records.len() as f64)
    }

    pub fn mean_loss(&self, records: &[PreferenceRecord]) -> Result<f64> {
        let mut total = 0.0;
        for r in records {
            total += pairwise_loss(self.score(&r.prompt, &r.chosen)?, self.score(&r.prompt, &r.rejected)?);
        }
        Ok(total / records.len().max(1) as f64)
    }

    fn train_batch(&mut self, opt: &mut AdamWState<f32>, batch: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.model.bind(&mut tape)?;
        let mut chosen = Vec::with_capacity(batch.len());
        let mut rejected = Vec::with_capacity(batch.len());
        for (c, r) in batch {
            chosen.push(self.score_var(&mut tape, &b, c)?);
            rejected.push(self.score_var(&mut tape, &b, r)?);
        }
        let c = tape.concat_rows(&chosen)?;
        let r = tape.concat_rows(&rejected)?;
        let margin = tape.sub(c, r)?;
        let ls = tape.log_sigmoid(margin);
        let mean = tape.mean(ls);
        let loss = tape.scale(mean, -1.0);
        let value = tape.scalar_value(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("reward loss is {value}")));
        }
        tape.backward(loss)?;
        self.model.zero_grads();
        self.model.collect_grads(&tape, &b)?;
        self.model.apply_step(opt)?;
        self.model.zero_grads();
        Ok(value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmMetrics {
    pub n_train: usize,
    pub n_holdout: usize,
    /// Mean pairwise loss over each epoch's batches.
    pub epoch_losses: Vec<f64>,
    pub initial_holdout_accuracy: f64,
    pub holdout_accuracy: f64,
    pub holdout_loss: f64,
    pub train_accuracy: f64,
}

/// Minimises the mean pairwise loss over a seeded train split and reports
/// accuracy on the held-out rest. Records are put in canonical order before
/// splitting, so their input order does not matter.
pub fn train_reward(rm: &mut RewardModel, records: &[PreferenceRecord], cfg: &RmConfig) -> Result<RmMetrics> {
    cfg.validate()?;
    if records.len() < 2 {
        return Err(Error::Training(format!("need at least 2 preference records, got {}", records.len())));
    }
    for r in records {
        r.validate()?;
    }
    let key = |r: &PreferenceRecord| (r.prompt.clone(), r.chosen.clone(), r.rejected.clone());
    if records.iter().all(|r| key(r) == key(&records[0])) {
        return Err(Error::Training("all preference records are identical".into()));
    }
    let mut sorted = records.to_vec();
    sorted.sort();
    let (train, holdout) = split_train_val(&sorted, cfg.holdout_fraction, cfg.seed)?;

    let encoded = train
        .iter()
        .map(|r| Ok((rm.encode(&r.prompt, &r.chosen)?, rm.encode(&r.prompt, &r.rejected)?)))
        .collect::<Result<Vec<_>>>()?;

    let initial_holdout_accuracy = rm.pairwise_accuracy(&holdout)?;
    let mut opt = AdamWState::new(AdamWConfig { lr: cfg.lr, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            sum += rm.train_batch(&mut opt, &batch)?;
            n += 1;
        }
        epoch_losses.push(sum / n as f64);
        log::info!("reward epoch {}: mean loss {:.4}", epoch + 1, sum / n as f64);
    }
    Ok(RmMetrics {
        n_train: train.len(),
        n_holdout: holdout.len(),
        epoch_losses,
        initial_holdout_accuracy,
        holdout_accuracy: rm.pairwise_accuracy(&holdout)?,
        holdout_loss: rm.mean_loss(&holdout)?,
        train_accuracy: rm.pairwise_accuracy(&train)?,
    })
}
